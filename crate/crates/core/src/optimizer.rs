//! Eigenvalue search: the joint temporal + KPDE cost, the distance penalty,
//! particle swarm global search and Nelder–Mead refinement.

use std::time::Instant;

use log::{debug, info};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, GramFactor};
use crate::par;
use crate::spatial::{
    drift_from_data, drift_on_grid, gradient_central_diff, kpde_cost, kpde_residual, EigenfunctionField,
    GridInterpolator, KpdeCostOptions, SpectralModel,
};
use crate::spectral::{build_fundamental_basis, build_projection_basis, Eigenvalue, EigenvalueSet, DEFAULT_IMAG_FLOOR};
use crate::systems::{flatten_state_major, select_subgrid, DynSystem, SimGrid, TrajectoryEnsemble};

/// Cost assigned to candidates whose linear solves fail.
pub const FAILURE_COST: f64 = 1e6;

/// Box bounds and fixed entries of the eigenvalue search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_free_pairs: usize,
    pub re_bounds: (f64, f64),
    pub im_bounds: (f64, f64),
    /// Injected verbatim into every candidate, ahead of the free pairs.
    pub fixed: Vec<Eigenvalue>,
    pub d_min: f64,
    pub penalty_weight: f64,
}

impl SearchSpace {
    pub fn new(n_free_pairs: usize, re_bounds: (f64, f64), im_bounds: (f64, f64), fixed: Vec<Eigenvalue>) -> Self {
        SearchSpace { n_free_pairs, re_bounds, im_bounds, fixed, d_min: 0.05, penalty_weight: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.re_bounds) || !ok(self.im_bounds) {
            return Err(Error::Config(format!(
                "invalid search bounds re {:?}, im {:?}",
                self.re_bounds, self.im_bounds
            )));
        }
        if self.im_bounds.0 < 0.0 {
            return Err(Error::Config("imaginary bounds must be nonnegative".into()));
        }
        if self.d_min < 0.0 || self.penalty_weight < 0.0 {
            return Err(Error::Config("d_min and penalty weight must be nonnegative".into()));
        }
        Ok(())
    }

    /// Length of the flattened free vector `(α₁, β₁, α₂, β₂, …)`.
    pub fn dim(&self) -> usize {
        2 * self.n_free_pairs
    }

    pub fn lower(&self) -> Vec<f64> {
        (0..self.n_free_pairs).flat_map(|_| [self.re_bounds.0, self.im_bounds.0]).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        (0..self.n_free_pairs).flat_map(|_| [self.re_bounds.1, self.im_bounds.1]).collect()
    }

    /// Fixed entries followed by the free pairs; `β` is stored as `|β|`.
    pub fn decode(&self, x: &[f64]) -> EigenvalueSet {
        let mut pairs = self.fixed.clone();
        let mut fixed = vec![true; pairs.len()];
        for c in x.chunks(2) {
            pairs.push(Eigenvalue::new(c[0], c[1]));
            fixed.push(false);
        }
        EigenvalueSet::with_fixed(pairs, fixed)
    }

    /// Free part of a decoded set.
    pub fn encode(&self, eigs: &EigenvalueSet) -> Vec<f64> {
        eigs.pairs
            .iter()
            .zip(&eigs.fixed)
            .filter(|(_, &f)| !f)
            .flat_map(|(p, _)| [p.re, p.im])
            .collect()
    }
}

/// Soft penalty on the closest pair of distinct eigenvalue entries.
///
/// Returns `weight·(d_min − min dᵢⱼ)` when the minimum distance falls below
/// `d_min`, otherwise 0.
pub fn distance_penalty(eigs: &EigenvalueSet, d_min: f64, weight: f64) -> f64 {
    let p = &eigs.pairs;
    let mut dmin = f64::INFINITY;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            dmin = dmin.min(p[i].distance(&p[j]));
        }
    }
    if dmin < d_min {
        weight * (d_min - dmin)
    } else {
        0.0
    }
}

/// Settings of the joint cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub ridge_weight: f64,
    pub gamma: f64,
    pub imag_floor: f64,
    pub kpde: KpdeCostOptions,
    /// Grid the eigenfunction samples are interpolated onto.
    pub interp_grid: SimGrid,
    pub smoothing: f64,
}

impl CostConfig {
    pub fn new(interp_grid: SimGrid) -> Self {
        CostConfig {
            ridge_weight: 1e-6,
            gamma: 1e-4,
            imag_floor: DEFAULT_IMAG_FLOOR,
            kpde: KpdeCostOptions::default(),
            interp_grid,
            smoothing: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_weight >= 0.0) || !(self.gamma >= 0.0) || !(self.imag_floor >= 0.0) {
            return Err(Error::Config("ridge weight, γ and imaginary floor must be nonnegative".into()));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::Config(format!("smoothing must lie in (0, 1], got {}", self.smoothing)));
        }
        self.interp_grid.validate()
    }
}

/// Value of the joint cost and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub temporal: f64,
    /// `NaN` when not evaluated (γ = 0 fast path).
    pub kpde: f64,
    pub penalty: f64,
}

impl CostBreakdown {
    /// A plain scalar objective value (used by generic searches).
    pub fn scalar(v: f64) -> Self {
        CostBreakdown { total: v, temporal: v, kpde: f64::NAN, penalty: 0.0 }
    }

    pub fn failure() -> Self {
        CostBreakdown { total: FAILURE_COST, temporal: FAILURE_COST, kpde: f64::NAN, penalty: 0.0 }
    }
}

/// Products of one full cost evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: CostBreakdown,
    pub eigs: EigenvalueSet,
    /// `m × n_φ`.
    pub c_ref: DMatrix<f64>,
    /// `n_φ × n_t`, columns in ensemble order.
    pub phi0: DMatrix<f64>,
    /// Interpolated field with gradients (present when the KPDE term ran).
    pub field: Option<EigenfunctionField>,
}

impl Evaluation {
    pub fn model(&self, ridge_weight: f64, shift: &[f64]) -> SpectralModel {
        SpectralModel {
            eigs: self.eigs.clone(),
            c_ref: self.c_ref.clone(),
            ridge_weight,
            shift: shift.to_vec(),
        }
    }
}

/// Data and precomputed operators for repeated cost evaluations.
#[derive(Debug, Clone)]
pub struct IdentificationProblem {
    pub ens: TrajectoryEnsemble,
    pub subgrid: Vec<usize>,
    pub cfg: CostConfig,
    pub interp: GridInterpolator,
    /// Drift components on the interpolation grid (unshifted coordinates).
    pub drift: Vec<DMatrix<f64>>,
    /// Extra nodes excluded from the KPDE cost.
    pub extra_mask: Option<DMatrix<bool>>,
    time: Vec<f64>,
    /// Flattened trajectories, one column each (`mN × n_t`).
    flat: DMatrix<f64>,
    flat_sub: DMatrix<f64>,
}

impl IdentificationProblem {
    /// With `sys` the drift is evaluated analytically; otherwise it is
    /// estimated from the trajectories' initial derivatives.
    pub fn new(sys: Option<&DynSystem>, ens: TrajectoryEnsemble, cfg: CostConfig) -> Result<Self> {
        cfg.validate()?;
        let subgrid = select_subgrid(&ens.grid)?;
        let interp = GridInterpolator::new(&ens.grid, &cfg.interp_grid, cfg.smoothing)?;
        let drift = match sys {
            Some(s) => drift_on_grid(s, &cfg.interp_grid)?,
            None => drift_from_data(&ens, &interp)?,
        };
        let len = ens.state_dim() * ens.n_samples;
        let mut flat = DMatrix::zeros(len, ens.len());
        for (i, s) in ens.states.iter().enumerate() {
            flat.column_mut(i).copy_from(&flatten_state_major(s));
        }
        let flat_sub = flat.select_columns(&subgrid);
        let time = ens.time_axis();
        Ok(IdentificationProblem { ens, subgrid, cfg, interp, drift, extra_mask: None, time, flat, flat_sub })
    }

    pub fn with_extra_mask(mut self, mask: DMatrix<bool>) -> Self {
        self.extra_mask = Some(mask);
        self
    }

    /// Same data with a different KPDE weight.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        let mut p = self.clone();
        p.cfg.gamma = gamma;
        p
    }

    /// Full evaluation: `(J, J_temp, J_KPDE)` plus `C_ref`, `Φ₀` and the field.
    ///
    /// `with_kpde = false` skips interpolation (`J_KPDE` is then `NaN` and
    /// excluded from `J`).
    pub fn evaluate(&self, eigs: &EigenvalueSet, with_kpde: bool) -> Result<Evaluation> {
        let mut eigs = eigs.clone();
        eigs.imag_floor = self.cfg.imag_floor;
        let eigs = eigs.floored();
        let lambda = self.cfg.ridge_weight;
        let e = build_fundamental_basis(&eigs, &self.time);
        let c_ref = linalg::ridge(&e, self.ens.reference(), lambda)?;
        let b = build_projection_basis(&c_ref, &eigs, &self.time)?;
        let factor: GramFactor = linalg::factor_gram(&b, lambda)?;

        let (phi0_sub, phi0) = if with_kpde {
            let all = factor.solve(&(&b * &self.flat));
            (all.select_columns(&self.subgrid), all)
        } else {
            let sub = factor.solve(&(&b * &self.flat_sub));
            let reference = factor.solve_vec(&(&b * self.flat.column(self.ens.reference_index)));
            let mut all = DMatrix::zeros(eigs.n_phi(), self.ens.len());
            for (k, &i) in self.subgrid.iter().enumerate() {
                all.set_column(i, &sub.column(k));
            }
            all.set_column(self.ens.reference_index, &reference);
            (sub, all)
        };
        if phi0_sub.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning("non-finite eigenfunction initial values".into()));
        }
        let recon = b.tr_mul(&phi0_sub);
        let temporal = (&self.flat_sub - recon).norm_squared() / self.flat_sub.len() as f64;

        let mut kpde = f64::NAN;
        let mut field = None;
        if with_kpde {
            let mut f = self.interp.interpolate(&phi0)?;
            if let Some(extra) = &self.extra_mask {
                f.mask.zip_apply(extra, |a, b| *a |= b);
            }
            gradient_central_diff(&mut f);
            let res = kpde_residual(&f, &eigs, &self.drift)?;
            kpde = kpde_cost(&res, &f.mask, self.cfg.kpde)?;
            field = Some(f);
        }
        let total = temporal + if with_kpde { self.cfg.gamma * kpde } else { 0.0 };
        Ok(Evaluation {
            breakdown: CostBreakdown { total, temporal, kpde, penalty: 0.0 },
            eigs,
            c_ref,
            phi0,
            field,
        })
    }

    /// `J = J_temp + γ·J_KPDE` with all parts evaluated.
    pub fn total_cost(&self, eigs: &EigenvalueSet) -> Result<CostBreakdown> {
        Ok(self.evaluate(eigs, true)?.breakdown)
    }

    /// Search objective: cost plus distance penalty, failures mapped to
    /// [`FAILURE_COST`]. The KPDE term is skipped when `γ = 0`.
    pub fn objective(&self, space: &SearchSpace, x: &[f64]) -> CostBreakdown {
        let eigs = space.decode(x);
        let penalty = distance_penalty(&eigs, space.d_min, space.penalty_weight);
        match self.evaluate(&eigs, self.cfg.gamma > 0.0) {
            Ok(ev) if ev.breakdown.total.is_finite() => {
                let mut b = ev.breakdown;
                b.penalty = penalty;
                b.total += penalty;
                b
            }
            Ok(_) => CostBreakdown::failure(),
            Err(e) => {
                debug!("candidate {x:?} failed: {e}");
                CostBreakdown::failure()
            }
        }
    }
}

/// Particle swarm hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoSettings {
    pub pop_size: usize,
    pub generations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub seed: u64,
}

impl Default for PsoSettings {
    fn default() -> Self {
        PsoSettings { pop_size: 50, generations: 200, inertia: 0.73, cognitive: 1.5, social: 1.5, seed: 0 }
    }
}

/// Per-generation record of a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub generation: usize,
    pub best: CostBreakdown,
    pub best_x: Vec<f64>,
    pub evaluations: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub rows: Vec<TraceRow>,
}

impl OptimizerTrace {
    pub fn best_costs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.best.total).collect()
    }
}

/// Outcome of a bounded minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub x: Vec<f64>,
    pub cost: CostBreakdown,
    pub evaluations: usize,
}

fn clip(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

/// Latin-hypercube sample of `n` points in the box.
pub fn latin_hypercube(n: usize, lo: &[f64], hi: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = lo.len();
    let mut pts = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, &s) in strata.iter().enumerate() {
            let u = (s as f64 + rng.gen::<f64>()) / n as f64;
            pts[i][j] = lo[j] + u * (hi[j] - lo[j]);
        }
    }
    pts
}

/// Global-best particle swarm over the box `[lo, hi]`.
///
/// `initial` candidates replace the first Latin-hypercube particles. Each
/// particle draws from its own seed-derived stream, so the result is
/// independent of thread scheduling.
pub fn pso_search<F>(
    objective: F,
    lo: &[f64],
    hi: &[f64],
    settings: &PsoSettings,
    initial: &[Vec<f64>],
) -> Result<(SearchResult, OptimizerTrace)>
where
    F: Fn(&[f64]) -> CostBreakdown + Sync,
{
    let d = lo.len();
    if hi.len() != d {
        return Err(Error::Dimension("bound vectors differ in length".into()));
    }
    if settings.pop_size < 2 {
        return Err(Error::Config(format!("population must be ≥ 2, got {}", settings.pop_size)));
    }
    let start = Instant::now();
    let n = settings.pop_size;
    let mut master = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut pos = latin_hypercube(n, lo, hi, &mut master);
    for (p, init) in pos.iter_mut().zip(initial) {
        p.copy_from_slice(init);
        clip(p, lo, hi);
    }
    let span: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
    let mut vel: Vec<Vec<f64>> = (0..n)
        .map(|_| span.iter().map(|s| 0.1 * s * master.gen_range(-1.0..=1.0)).collect())
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(settings.seed);
            r.set_stream(1 + i as u64);
            r
        })
        .collect();

    let mut cost = par::map_slice(&pos, |x| objective(x));
    let mut evaluations = n;
    let mut pbest = pos.clone();
    let mut pbest_cost = cost.clone();
    let argmin = |c: &[CostBreakdown]| {
        (0..c.len()).fold(0, |b, i| if c[i].total < c[b].total { i } else { b })
    };
    let g = argmin(&cost);
    let mut gbest = pos[g].clone();
    let mut gbest_cost = cost[g];
    let mut trace = OptimizerTrace::default();
    trace.rows.push(TraceRow {
        generation: 0,
        best: gbest_cost,
        best_x: gbest.clone(),
        evaluations,
        wall_seconds: start.elapsed().as_secs_f64(),
    });

    for gen in 1..=settings.generations {
        for i in 0..n {
            let r = &mut rngs[i];
            for j in 0..d {
                let (r1, r2): (f64, f64) = (r.gen(), r.gen());
                let v = settings.inertia * vel[i][j]
                    + settings.cognitive * r1 * (pbest[i][j] - pos[i][j])
                    + settings.social * r2 * (gbest[j] - pos[i][j]);
                vel[i][j] = v.clamp(-span[j], span[j]);
                pos[i][j] += vel[i][j];
            }
            clip(&mut pos[i], lo, hi);
        }
        cost = par::map_slice(&pos, |x| objective(x));
        evaluations += n;
        for i in 0..n {
            if cost[i].total < pbest_cost[i].total {
                pbest[i].copy_from_slice(&pos[i]);
                pbest_cost[i] = cost[i];
            }
        }
        let g = argmin(&pbest_cost);
        if pbest_cost[g].total < gbest_cost.total {
            gbest = pbest[g].clone();
            gbest_cost = pbest_cost[g];
        }
        trace.rows.push(TraceRow {
            generation: gen,
            best: gbest_cost,
            best_x: gbest.clone(),
            evaluations,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if gen % 25 == 0 {
            debug!("PSO generation {gen}: best {:.4e}", gbest_cost.total);
        }
    }
    Ok((SearchResult { x: gbest, cost: gbest_cost, evaluations }, trace))
}

/// Nelder–Mead settings; coefficients are the standard (1, 2, ½, ½).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadSettings {
    pub max_iter: usize,
    /// Initial simplex edge as a fraction of each bound range.
    pub initial_step: f64,
    /// Stop when the spread of simplex costs falls below this (absolute).
    pub ftol: f64,
    /// ... and the simplex diameter falls below this.
    pub xtol: f64,
}

impl Default for NelderMeadSettings {
    fn default() -> Self {
        NelderMeadSettings { max_iter: 1000, initial_step: 0.05, ftol: 1e-14, xtol: 1e-10 }
    }
}

/// Refines `x0` with bound-projected Nelder–Mead; never returns a worse
/// point than `x0`.
pub fn nelder_mead_refine<F>(
    objective: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    settings: &NelderMeadSettings,
) -> SearchResult
where
    F: Fn(&[f64]) -> CostBreakdown,
{
    let d = x0.len();
    let mut start = x0.to_vec();
    clip(&mut start, lo, hi);
    let mut simplex = vec![start.clone()];
    for j in 0..d {
        let mut v = start.clone();
        let step = settings.initial_step * (hi[j] - lo[j]).max(1e-12);
        // step inward if the forward step would leave the box
        v[j] = if v[j] + step <= hi[j] { v[j] + step } else { v[j] - step };
        clip(&mut v, lo, hi);
        simplex.push(v);
    }
    nelder_mead_simplex(objective, simplex, lo, hi, settings)
}

/// Nelder–Mead from an explicit initial simplex (`d + 1` vertices).
pub fn nelder_mead_simplex<F>(
    objective: F,
    mut simplex: Vec<Vec<f64>>,
    lo: &[f64],
    hi: &[f64],
    settings: &NelderMeadSettings,
) -> SearchResult
where
    F: Fn(&[f64]) -> CostBreakdown,
{
    let d = lo.len();
    let project = |mut v: Vec<f64>| {
        clip(&mut v, lo, hi);
        v
    };
    let mut f: Vec<CostBreakdown> = simplex.iter().map(|v| objective(v)).collect();
    let mut evaluations = simplex.len();
    let start_x = simplex[0].clone();
    let start_f = f[0];
    for _ in 0..settings.max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| f[a].total.total_cmp(&f[b].total));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        f = order.iter().map(|&i| f[i]).collect();

        let spread = f[d].total - f[0].total;
        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if diameter <= settings.xtol && spread <= settings.ftol.max(1e-15 * f[0].total.abs()) {
            break;
        }
        if diameter == 0.0 {
            // collapsed simplex: shrinking cannot make progress
            break;
        }

        let centroid: Vec<f64> =
            (0..d).map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| project((0..d).map(|j| centroid[j] + t * (simplex[d][j] - centroid[j])).collect());

        let xr = along(-1.0);
        let fr = objective(&xr);
        evaluations += 1;
        if fr.total < f[0].total {
            let xe = along(-2.0);
            let fe = objective(&xe);
            evaluations += 1;
            if fe.total < fr.total {
                simplex[d] = xe;
                f[d] = fe;
            } else {
                simplex[d] = xr;
                f[d] = fr;
            }
            continue;
        }
        if fr.total < f[d - 1].total {
            simplex[d] = xr;
            f[d] = fr;
            continue;
        }
        let (xc, fc) = if fr.total < f[d].total {
            let xc = along(-0.5);
            let fc = objective(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = objective(&xc);
            (xc, fc)
        };
        evaluations += 1;
        if fc.total < f[d].total.min(fr.total) {
            simplex[d] = xc;
            f[d] = fc;
            continue;
        }
        // shrink towards the best vertex
        for i in 1..=d {
            let v: Vec<f64> = (0..d).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
            simplex[i] = project(v);
            f[i] = objective(&simplex[i]);
            evaluations += 1;
        }
    }
    let best = (0..f.len()).fold(0, |b, i| if f[i].total < f[b].total { i } else { b });
    if f[best].total <= start_f.total {
        SearchResult { x: simplex[best].clone(), cost: f[best], evaluations }
    } else {
        SearchResult { x: start_x, cost: start_f, evaluations }
    }
}

/// Global + local search schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifySettings {
    pub pso: PsoSettings,
    pub nelder_mead: NelderMeadSettings,
    /// Run the swarm on the temporal cost only (`γ = 0`) and apply `γ` in
    /// the Nelder–Mead phase.
    pub two_phase: bool,
}

impl Default for IdentifySettings {
    fn default() -> Self {
        IdentifySettings { pso: PsoSettings::default(), nelder_mead: NelderMeadSettings::default(), two_phase: false }
    }
}

/// Result of [`identify`].
#[derive(Debug, Clone)]
pub struct Identification {
    /// Best spectrum after the imaginary floor, fixed entries first.
    pub eigs: EigenvalueSet,
    pub free: Vec<f64>,
    pub pso_best: SearchResult,
    pub refined: SearchResult,
    pub trace: OptimizerTrace,
    /// Full evaluation (with KPDE) at the optimum.
    pub evaluation: Evaluation,
}

/// PSO followed by Nelder–Mead on the joint cost.
pub fn identify(
    problem: &IdentificationProblem,
    space: &SearchSpace,
    settings: &IdentifySettings,
    initial: &[Vec<f64>],
) -> Result<Identification> {
    space.validate()?;
    let (lo, hi) = (space.lower(), space.upper());
    let pso_problem = if settings.two_phase { problem.with_gamma(0.0) } else { problem.clone() };
    let (pso_best, trace) = if space.dim() == 0 {
        let c = problem.objective(space, &[]);
        (SearchResult { x: vec![], cost: c, evaluations: 1 }, OptimizerTrace::default())
    } else {
        pso_search(|x| pso_problem.objective(space, x), &lo, &hi, &settings.pso, initial)?
    };
    info!("PSO best J = {:.4e} after {} evaluations", pso_best.cost.total, pso_best.evaluations);
    let start_cost = problem.objective(space, &pso_best.x);
    let refined = if space.dim() == 0 || settings.nelder_mead.max_iter == 0 {
        SearchResult { x: pso_best.x.clone(), cost: start_cost, evaluations: 0 }
    } else {
        nelder_mead_refine(|x| problem.objective(space, x), &pso_best.x, &lo, &hi, &settings.nelder_mead)
    };
    info!("Nelder–Mead J = {:.4e}", refined.cost.total);
    let eigs = space.decode(&refined.x);
    let evaluation = problem.evaluate(&eigs, true)?;
    Ok(Identification {
        eigs: evaluation.eigs.clone(),
        free: refined.x.clone(),
        pso_best,
        refined,
        trace,
        evaluation,
    })
}

/// Prepends the conservative mode: `λ₀ = 0`, a row of ones in `Φ₀` and the
/// fixed point as the first mode column (`C_ref = [x_fp C_ref]`).
pub fn concat_conservative_mode(
    eigs: &EigenvalueSet,
    phi0: &DMatrix<f64>,
    c_ref: &DMatrix<f64>,
    fixed_point: &[f64],
) -> Result<(EigenvalueSet, DMatrix<f64>, DMatrix<f64>)> {
    if fixed_point.len() != c_ref.nrows() {
        return Err(Error::Dimension(format!(
            "fixed point has {} entries, modes have {} rows",
            fixed_point.len(),
            c_ref.nrows()
        )));
    }
    let mut pairs = vec![Eigenvalue::real(0.0)];
    pairs.extend(eigs.pairs.iter().copied());
    let mut fixed = vec![true];
    fixed.extend(eigs.fixed.iter().copied());
    let mut out = EigenvalueSet::with_fixed(pairs, fixed);
    out.imag_floor = eigs.imag_floor;
    let phi = phi0.clone().insert_row(0, 1.0);
    let mut c = c_ref.clone().insert_column(0, 0.0);
    for (r, &v) in fixed_point.iter().enumerate() {
        c[(r, 0)] = v;
    }
    Ok((out, phi, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::reconstruct;
    use crate::systems::{simulate_ensemble, SubgridRule};
    use nalgebra::DVector;

    fn sphere(x: &[f64]) -> CostBreakdown {
        CostBreakdown::scalar(x.iter().map(|v| v * v).sum())
    }

    #[test]
    fn distance_penalty_cases() {
        let same = EigenvalueSet::from_tuples(&[(-1.0, 0.5), (-1.0, 0.5)]);
        assert!((distance_penalty(&same, 0.05, 2.0) - 0.1).abs() < 1e-15);
        let apart = EigenvalueSet::from_tuples(&[(-1.0, 0.5), (-1.0, 0.55)]);
        assert!(distance_penalty(&apart, 0.05 - 1e-12, 1.0) == 0.0);
        let duff = EigenvalueSet::from_tuples(&[(-0.25, 1.392), (-1.281, 0.0)]);
        let d = duff.pairs[0].distance(&duff.pairs[1]);
        assert!((d - 1.732).abs() < 1e-3);
        assert_eq!(distance_penalty(&duff, 0.05, 1.0), 0.0);
    }

    #[test]
    fn search_space_round_trip() {
        let space = SearchSpace::new(2, (-2.0, -0.1), (0.0, 1.0), vec![Eigenvalue::real(-0.1)]);
        let eigs = space.decode(&[-0.2, -0.3, -0.5, 0.0]);
        assert_eq!(eigs.pairs[0], Eigenvalue::real(-0.1));
        assert!(eigs.fixed[0] && !eigs.fixed[1]);
        assert_eq!(eigs.pairs[1].im, 0.3);
        assert_eq!(space.encode(&eigs), vec![-0.2, 0.3, -0.5, 0.0]);
    }

    #[test]
    fn pso_minimizes_sphere_and_is_monotone() {
        let s = PsoSettings { pop_size: 50, generations: 200, seed: 3, ..Default::default() };
        let (best, trace) = pso_search(sphere, &[-5.0, -5.0], &[5.0, 5.0], &s, &[]).unwrap();
        assert!(best.cost.total < 1e-3);
        assert!(trace.best_costs().windows(2).all(|w| w[1] <= w[0]));
        let (again, _) = pso_search(sphere, &[-5.0, -5.0], &[5.0, 5.0], &s, &[]).unwrap();
        assert_eq!(best.x, again.x);
    }

    #[test]
    fn nelder_mead_quadratic_bowl() {
        let f = |x: &[f64]| CostBreakdown::scalar((x[0] - 0.3).powi(2) + 2.0 * (x[1] + 0.7).powi(2));
        let r = nelder_mead_refine(f, &[2.0, 2.0], &[-5.0, -5.0], &[5.0, 5.0], &NelderMeadSettings::default());
        assert!((r.x[0] - 0.3).abs() < 1e-6 && (r.x[1] + 0.7).abs() < 1e-6);
    }

    #[test]
    fn nelder_mead_respects_bounds_and_degenerate_simplex() {
        let f = |x: &[f64]| CostBreakdown::scalar((x[0] - 3.0).powi(2));
        let r = nelder_mead_refine(f, &[0.0], &[-1.0], &[1.0], &NelderMeadSettings::default());
        assert!((r.x[0] - 1.0).abs() < 1e-8);
        let simplex = vec![vec![0.5, 0.5]; 3];
        let r = nelder_mead_simplex(sphere, simplex, &[-1.0; 2], &[1.0; 2], &NelderMeadSettings::default());
        assert_eq!(r.x, vec![0.5, 0.5]);
    }

    fn closure_problem(n: usize, gamma: f64) -> IdentificationProblem {
        let sys = DynSystem::closure_default();
        let grid = SimGrid::square(-1.0, 1.0, n).unwrap().with_subgrid(SubgridRule::ODD);
        let ens = simulate_ensemble(&sys, &grid, 0.2, 250, &[-1.0, -1.0], None).unwrap();
        let mut cfg = CostConfig::new(SimGrid::square(-1.0, 1.0, 30).unwrap());
        cfg.gamma = gamma;
        IdentificationProblem::new(Some(&sys), ens, cfg).unwrap()
    }

    #[test]
    fn zero_gamma_total_equals_temporal_and_is_deterministic() {
        let p = closure_problem(9, 0.0);
        let eigs = EigenvalueSet::from_tuples(&[(-0.1, 0.0), (-0.2, 0.0), (-1.0, 0.0), (-0.5, 0.0)]);
        let a = p.total_cost(&eigs).unwrap();
        assert_eq!(a.total, a.temporal);
        assert!(a.kpde.is_finite());
        let b = p.total_cost(&eigs).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        let space = SearchSpace::new(0, (-2.0, 0.0), (0.0, 1.0), eigs.pairs.clone());
        assert_eq!(p.objective(&space, &[]).total, a.total);
    }

    #[test]
    fn cost_invariant_to_free_pair_order() {
        let p = closure_problem(9, 1e-4);
        let space = SearchSpace::new(2, (-2.0, -0.1), (0.0, 1.0), vec![Eigenvalue::real(-0.1), Eigenvalue::real(-1.0)]);
        let a = p.objective(&space, &[-0.2, 0.0, -0.45, 0.3]);
        let b = p.objective(&space, &[-0.45, -0.3, -0.2, 0.0]);
        assert!((a.total - b.total).abs() <= 1e-9 * a.total.abs(), "{a:?} {b:?}");
    }

    #[test]
    fn failed_solves_map_to_penalty_cost() {
        let mut p = closure_problem(5, 0.0);
        p.cfg.ridge_weight = 0.0;
        let space = SearchSpace::new(1, (-2.0, 0.0), (0.0, 1.0), vec![Eigenvalue::real(-0.5)]);
        // duplicate eigenvalue makes E rank deficient
        assert_eq!(p.objective(&space, &[-0.5, 0.0]).total, FAILURE_COST);
    }

    #[test]
    fn conservative_mode_concatenation() {
        let eigs = EigenvalueSet::from_tuples(&[(-0.3, 0.436)]);
        let phi0 = DMatrix::from_element(2, 3, 0.5);
        let c = DMatrix::from_element(2, 2, 0.1);
        let (e, p, cc) = concat_conservative_mode(&eigs, &phi0, &c, &[0.0345, 0.0345]).unwrap();
        assert_eq!(e.pairs[0], Eigenvalue::real(0.0));
        assert_eq!(e.n_phi(), 3);
        assert!(p.row(0).iter().all(|&v| v == 1.0));
        assert_eq!(cc.column(0).as_slice(), &[0.0345, 0.0345]);
        let t: Vec<f64> = vec![0.0, 100.0];
        let x = reconstruct(&cc, &e, &DVector::from_column_slice(p.column(0).as_slice()), &t);
        assert!((x[(0, 1)] - 0.0345).abs() < 1e-3 && (x[(1, 1)] - 0.0345).abs() < 1e-3);
        let (_, _, zero) = concat_conservative_mode(&eigs, &phi0, &c, &[0.0, 0.0]).unwrap();
        assert!(zero.column(0).iter().all(|&v| v == 0.0));
    }
}
