//! Eigenfunction fields over the state space and the Koopman PDE residual.
//!
//! A field lives on a regular 2-D grid. Each eigenfunction is an `n₁ × n₂`
//! matrix whose entry `(i, j)` is the value at `(x₁[i], x₂[j])`, the same
//! ordering as [`SimGrid`] node indices (`idx = i·n₂ + j`).

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::spectral::{EigenvalueSet, Projector};
use crate::spline::TensorSpline2;
use crate::systems::{simulate_ensemble, DynSystem, SimGrid, TrajectoryEnsemble};

/// Eigenfunction samples, gradients and exclusion mask on a 2-D grid.
#[derive(Debug, Clone)]
pub struct EigenfunctionField {
    pub grid: SimGrid,
    /// One `n₁ × n₂` matrix per eigenfunction.
    pub values: Vec<DMatrix<f64>>,
    /// `gradient[φ][d]`, filled by [`gradient_central_diff`].
    pub gradient: Option<Vec<Vec<DMatrix<f64>>>>,
    pub smoothing: f64,
    /// `true` marks nodes excluded from residuals and fits.
    pub mask: DMatrix<bool>,
}

impl EigenfunctionField {
    pub fn n_phi(&self) -> usize {
        self.values.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.grid.counts[0], self.grid.counts[1])
    }

    /// Eigenfunction values at node `(i, j)`.
    pub fn node_values(&self, i: usize, j: usize) -> DVector<f64> {
        DVector::from_iterator(self.values.len(), self.values.iter().map(|v| v[(i, j)]))
    }

    /// `∇Φ` at node `(i, j)` as `n_φ × 2`.
    pub fn node_gradient(&self, i: usize, j: usize) -> Option<DMatrix<f64>> {
        let g = self.gradient.as_ref()?;
        Some(DMatrix::from_fn(g.len(), 2, |r, d| g[r][d][(i, j)]))
    }

    /// Bilinear interpolation of all eigenfunctions at `x` (clamped to the grid).
    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        let w = bilinear_weights(&self.grid, x);
        DVector::from_iterator(self.values.len(), self.values.iter().map(|v| w.apply(v)))
    }

    /// Bilinear interpolation of `∇Φ` at `x` (`n_φ × 2`).
    pub fn eval_gradient(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let g = self.gradient.as_ref()?;
        let w = bilinear_weights(&self.grid, x);
        Some(DMatrix::from_fn(g.len(), 2, |r, d| w.apply(&g[r][d])))
    }

    /// Keeps only the listed eigenfunctions (rows), in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        EigenfunctionField {
            grid: self.grid.clone(),
            values: rows.iter().map(|&r| self.values[r].clone()).collect(),
            gradient: self.gradient.as_ref().map(|g| rows.iter().map(|&r| g[r].clone()).collect()),
            smoothing: self.smoothing,
            mask: self.mask.clone(),
        }
    }
}

/// Corner indices and weights for bilinear interpolation.
#[derive(Debug, Clone, Copy)]
pub struct Bilinear {
    i: usize,
    j: usize,
    wx: f64,
    wy: f64,
}

impl Bilinear {
    pub fn apply(&self, v: &DMatrix<f64>) -> f64 {
        let (i, j, a, b) = (self.i, self.j, self.wx, self.wy);
        (1.0 - a) * (1.0 - b) * v[(i, j)]
            + a * (1.0 - b) * v[(i + 1, j)]
            + (1.0 - a) * b * v[(i, j + 1)]
            + a * b * v[(i + 1, j + 1)]
    }
}

pub fn bilinear_weights(grid: &SimGrid, x: &[f64]) -> Bilinear {
    let cell = |d: usize| -> (usize, f64) {
        let (lo, _) = grid.ranges[d];
        let n = grid.counts[d];
        let f = ((x[d] - lo) / grid.spacing(d)).clamp(0.0, (n - 1) as f64);
        let i = (f.floor() as usize).min(n - 2);
        (i, f - i as f64)
    };
    let (i, wx) = cell(0);
    let (j, wy) = cell(1);
    Bilinear { i, j, wx, wy }
}

fn require_2d(grid: &SimGrid, what: &str) -> Result<()> {
    if grid.dim() != 2 {
        return Err(Error::Config(format!("{what} supports 2-D grids only, got {}-D", grid.dim())));
    }
    Ok(())
}

/// Reusable interpolation operator from a sampling grid onto a target grid.
#[derive(Debug, Clone)]
pub struct GridInterpolator {
    pub source: SimGrid,
    pub target: SimGrid,
    pub smoothing: f64,
    spline: TensorSpline2,
    /// Target nodes outside the sampling hull.
    outside: DMatrix<bool>,
}

impl GridInterpolator {
    pub fn new(source: &SimGrid, target: &SimGrid, smoothing: f64) -> Result<Self> {
        require_2d(source, "interpolation")?;
        require_2d(target, "interpolation")?;
        let (s1, s2) = (source.axis(0), source.axis(1));
        let (t1, t2) = (target.axis(0), target.axis(1));
        let spline = TensorSpline2::new((&s1, &s2), (&t1, &t2), smoothing)?;
        let tol = 1e-9;
        let inside = |v: f64, d: usize| v >= source.ranges[d].0 - tol && v <= source.ranges[d].1 + tol;
        let outside = DMatrix::from_fn(t1.len(), t2.len(), |i, j| !(inside(t1[i], 0) && inside(t2[j], 1)));
        Ok(GridInterpolator {
            source: source.clone(),
            target: target.clone(),
            smoothing,
            spline,
            outside,
        })
    }

    /// Interpolates sample rows (`n_φ × n_t`, columns in source-grid order).
    pub fn interpolate(&self, samples: &DMatrix<f64>) -> Result<EigenfunctionField> {
        let (n1, n2) = (self.source.counts[0], self.source.counts[1]);
        if samples.ncols() != n1 * n2 {
            return Err(Error::Dimension(format!(
                "{} samples for a {n1}×{n2} sampling grid",
                samples.ncols()
            )));
        }
        let values = par::map_range(samples.nrows(), |r| {
            let v = DMatrix::from_fn(n1, n2, |i, j| samples[(r, i * n2 + j)]);
            self.spline.apply(&v)
        });
        if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Conditioning("non-finite interpolated eigenfunction values".into()));
        }
        Ok(EigenfunctionField {
            grid: self.target.clone(),
            values,
            gradient: None,
            smoothing: self.smoothing,
            mask: self.outside.clone(),
        })
    }

    /// Interpolates a scalar field given as one sample per source node.
    pub fn interpolate_scalar(&self, samples: &[f64]) -> DMatrix<f64> {
        let n2 = self.source.counts[1];
        let v = DMatrix::from_fn(self.source.counts[0], n2, |i, j| samples[i * n2 + j]);
        self.spline.apply(&v)
    }
}

/// Smoothing-spline field of `Φ₀` samples taken on `sample_grid`.
pub fn interpolate_field(
    sample_grid: &SimGrid,
    samples: &DMatrix<f64>,
    target: &SimGrid,
    smoothing: f64,
) -> Result<EigenfunctionField> {
    GridInterpolator::new(sample_grid, target, smoothing)?.interpolate(samples)
}

/// Central differences along both axes of one `n₁ × n₂` field.
///
/// Interior nodes use `(v⁺ − v⁻)/(2Δ)`; edges use second-order one-sided
/// stencils.
pub fn central_diff(v: &DMatrix<f64>, h: (f64, f64)) -> [DMatrix<f64>; 2] {
    let (n1, n2) = v.shape();
    let d1 = DMatrix::from_fn(n1, n2, |i, j| diff_at(i, n1, h.0, |k| v[(k, j)]));
    let d2 = DMatrix::from_fn(n1, n2, |i, j| diff_at(j, n2, h.1, |k| v[(i, k)]));
    [d1, d2]
}

fn diff_at(i: usize, n: usize, h: f64, f: impl Fn(usize) -> f64) -> f64 {
    if n < 3 {
        return (f(n - 1) - f(0)) / (h * (n - 1) as f64);
    }
    if i == 0 {
        (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h)
    } else if i == n - 1 {
        (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / (2.0 * h)
    } else {
        (f(i + 1) - f(i - 1)) / (2.0 * h)
    }
}

/// Populates `field.gradient` by central differences on the field's grid.
pub fn gradient_central_diff(field: &mut EigenfunctionField) {
    let h = (field.grid.spacing(0), field.grid.spacing(1));
    let grads = par::map_slice(&field.values, |v| {
        let [a, b] = central_diff(v, h);
        vec![a, b]
    });
    field.gradient = Some(grads);
}

/// Drift components `F_d` evaluated on every grid node.
pub fn drift_on_grid(sys: &DynSystem, grid: &SimGrid) -> Result<Vec<DMatrix<f64>>> {
    require_2d(grid, "drift sampling")?;
    let (a1, a2) = (grid.axis(0), grid.axis(1));
    let mut f = vec![DMatrix::zeros(a1.len(), a2.len()); 2];
    let mut out = [0.0; 2];
    for (i, &x1) in a1.iter().enumerate() {
        for (j, &x2) in a2.iter().enumerate() {
            sys.drift_into(&[x1, x2], &mut out);
            f[0][(i, j)] = out[0];
            f[1][(i, j)] = out[1];
        }
    }
    Ok(f)
}

/// Drift surrogate for unknown dynamics: initial derivatives of every
/// trajectory (second-order forward differences), interpolated onto `interp`'s
/// target grid.
pub fn drift_from_data(ens: &TrajectoryEnsemble, interp: &GridInterpolator) -> Result<Vec<DMatrix<f64>>> {
    if ens.n_samples < 3 {
        return Err(Error::InsufficientData { needed: 3, got: ens.n_samples });
    }
    let m = ens.state_dim();
    let dt = ens.dt;
    (0..m)
        .map(|d| {
            let samples: Vec<f64> = ens
                .states
                .iter()
                .map(|s| (-3.0 * s[(d, 0)] + 4.0 * s[(d, 1)] - s[(d, 2)]) / (2.0 * dt))
                .collect();
            Ok(interp.interpolate_scalar(&samples))
        })
        .collect()
}

/// `∇Φ·F − ΛΦ` on every node; masked nodes are set to zero.
pub fn kpde_residual(
    field: &EigenfunctionField,
    eigs: &EigenvalueSet,
    drift: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let grad = field
        .gradient
        .as_ref()
        .ok_or_else(|| Error::State("KPDE residual requested before the gradient was computed".into()))?;
    if eigs.n_phi() != field.n_phi() {
        return Err(Error::Dimension(format!(
            "field has {} eigenfunctions, spectrum has {}",
            field.n_phi(),
            eigs.n_phi()
        )));
    }
    if drift.len() != 2 || drift[0].shape() != field.shape() {
        return Err(Error::Dimension("drift must be sampled on the field grid".into()));
    }
    let (n1, n2) = field.shape();
    let mut out = Vec::with_capacity(field.n_phi());
    for (p, o) in eigs.pairs.iter().zip(eigs.offsets()) {
        let lhs = |r: usize| grad[r][0].component_mul(&drift[0]) + grad[r][1].component_mul(&drift[1]);
        if p.is_real() {
            out.push(lhs(o) - &field.values[o] * p.re);
        } else {
            let (a, b) = (&field.values[o], &field.values[o + 1]);
            out.push(lhs(o) - (a * p.re - b * p.im));
            out.push(lhs(o + 1) - (a * p.im + b * p.re));
        }
    }
    for r in &mut out {
        for i in 0..n1 {
            for j in 0..n2 {
                if field.mask[(i, j)] {
                    r[(i, j)] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Options for [`kpde_cost`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpdeCostOptions {
    /// Symmetric entrywise clamp applied before squaring.
    pub clamp: Option<f64>,
    /// Number of outer node rings left out.
    pub edge_trim: usize,
}

impl Default for KpdeCostOptions {
    fn default() -> Self {
        KpdeCostOptions { clamp: None, edge_trim: 1 }
    }
}

/// Mean squared residual over unmasked interior nodes.
pub fn kpde_cost(residuals: &[DMatrix<f64>], mask: &DMatrix<bool>, opts: KpdeCostOptions) -> Result<f64> {
    let (n1, n2) = mask.shape();
    let t = opts.edge_trim;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in t..n1.saturating_sub(t) {
        for j in t..n2.saturating_sub(t) {
            if mask[(i, j)] {
                continue;
            }
            for r in residuals {
                let mut v = r[(i, j)];
                if let Some(c) = opts.clamp {
                    v = v.clamp(-c, c);
                }
                sum += v * v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::State("no unmasked nodes for the KPDE cost".into()));
    }
    Ok(sum / count as f64)
}

/// Fixed spectrum and reference modes from a finished identification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralModel {
    /// Floored spectrum the modes were fitted against.
    pub eigs: EigenvalueSet,
    /// `m × n_φ`.
    pub c_ref: DMatrix<f64>,
    pub ridge_weight: f64,
    /// Offset subtracted from trajectories before projection.
    pub shift: Vec<f64>,
}

/// Settings for the one-off high-resolution refinement.
#[derive(Debug, Clone)]
pub struct RefineSettings {
    pub fine_grid: SimGrid,
    pub fine_interp: SimGrid,
    pub dt: f64,
    pub n_samples: usize,
    pub smoothing: f64,
}

/// Result of [`refine_field`]: the field and the raw projections.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub field: EigenfunctionField,
    /// `n_φ × n_fine`, columns in fine-grid order.
    pub phi0: DMatrix<f64>,
}

/// Re-projects densely sampled trajectories with fixed `(Λ, C_ref)`, then
/// interpolates and differentiates the result.
pub fn refine_field(sys: &DynSystem, model: &SpectralModel, settings: &RefineSettings) -> Result<Refinement> {
    let fine = &settings.fine_grid;
    // the reference index is irrelevant here; any node will do
    let ens = simulate_ensemble(sys, fine, settings.dt, settings.n_samples, &fine.point(0), None)?;
    let ens = if model.shift.iter().any(|&s| s != 0.0) { ens.shift_by(&model.shift) } else { ens };
    let t = ens.time_axis();
    let b = crate::spectral::build_projection_basis(&model.c_ref, &model.eigs, &t)?;
    let projector = Projector::new(b, model.ridge_weight)?;
    let phi0 = projector.project_all(&ens.states)?;
    let mut field = interpolate_field(fine, &phi0, &settings.fine_interp, settings.smoothing)?;
    gradient_central_diff(&mut field);
    Ok(Refinement { field, phi0 })
}

/// Two plateau levels of an indicator eigenfunction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndicatorLevels {
    pub low: f64,
    pub high: f64,
}

impl IndicatorLevels {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }

    /// `true` for the basin whose plateau is `high`.
    pub fn classify(&self, v: f64) -> bool {
        v > self.midpoint()
    }
}

/// Estimates the two dominant histogram modes of indicator values.
///
/// Returns `None` when the histogram has a single dominant mode.
pub fn indicator_levels(values: &[f64]) -> Option<IndicatorLevels> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 4 {
        return None;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    let scale = finite.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    // plateaus closer than 1% of the magnitude are not distinct basins
    if spread <= 1e-2 * scale {
        return None;
    }
    const BINS: usize = 64;
    let bin = |v: f64| (((v - lo) / spread * BINS as f64) as usize).min(BINS - 1);
    let mut hist = [0usize; BINS];
    for &v in &finite {
        hist[bin(v)] += 1;
    }
    let first = (0..BINS).max_by_key(|&b| (hist[b], usize::MAX - b)).unwrap();
    // best second peak separated from the first by a clear valley
    let mut best: Option<(usize, usize)> = None;
    for b in 0..BINS {
        if b == first || hist[b] == 0 {
            continue;
        }
        let (a, c) = if b < first { (b, first) } else { (first, b) };
        let valley = (a..=c).map(|k| hist[k]).min().unwrap();
        let smaller = hist[b].min(hist[first]);
        if (valley as f64) < 0.5 * smaller as f64 && best.map_or(true, |(_, h)| hist[b] > h) {
            best = Some((b, hist[b]));
        }
    }
    let (second, count) = best?;
    if (count as f64) < 0.02 * finite.len() as f64 {
        return None;
    }
    let center = |b: usize| -> f64 {
        let (sum, n) = finite
            .iter()
            .filter(|&&v| bin(v).abs_diff(b) <= 1)
            .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        sum / n as f64
    };
    let (a, b) = (center(first), center(second));
    Some(IndicatorLevels { low: a.min(b), high: a.max(b) })
}

/// Marks nodes whose indicator value lies within `margin` of the midpoint
/// between the two plateau levels. A single-basin field yields an empty mask.
pub fn separatrix_mask(field: &EigenfunctionField, indicator: usize, margin: f64) -> Result<DMatrix<bool>> {
    if indicator >= field.n_phi() {
        return Err(Error::Dimension(format!("no eigenfunction {indicator} in the field")));
    }
    let v = &field.values[indicator];
    match indicator_levels(v.as_slice()) {
        Some(levels) => {
            let mid = levels.midpoint();
            Ok(v.map(|x| (x - mid).abs() <= margin))
        }
        None => {
            warn!("indicator eigenfunction is unimodal; separatrix mask is empty");
            Ok(DMatrix::from_element(v.nrows(), v.ncols(), false))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Eigenvalue;

    fn field_from(grid: &SimGrid, f: impl Fn(f64, f64) -> Vec<f64>) -> EigenfunctionField {
        let (a1, a2) = (grid.axis(0), grid.axis(1));
        let n = f(a1[0], a2[0]).len();
        let values = (0..n)
            .map(|r| DMatrix::from_fn(a1.len(), a2.len(), |i, j| f(a1[i], a2[j])[r]))
            .collect();
        EigenfunctionField {
            grid: grid.clone(),
            values,
            gradient: None,
            smoothing: 1.0,
            mask: DMatrix::from_element(a1.len(), a2.len(), false),
        }
    }

    fn samples_on(grid: &SimGrid, f: impl Fn(&[f64]) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(1, grid.len(), |_, k| f(&grid.point(k)))
    }

    #[test]
    fn constant_samples_give_constant_field() {
        let src = SimGrid::square(-1.0, 1.0, 21).unwrap();
        let dst = SimGrid::square(-1.0, 1.0, 50).unwrap();
        let f = interpolate_field(&src, &samples_on(&src, |_| 2.5), &dst, 1.0).unwrap();
        assert!(f.values[0].iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn quadratic_samples_are_reproduced() {
        let src = SimGrid::square(-1.0, 1.0, 21).unwrap();
        let dst = SimGrid::square(-1.0, 1.0, 100).unwrap();
        let f = interpolate_field(&src, &samples_on(&src, |x| x[0] * x[0]), &dst, 1.0).unwrap();
        let a1 = dst.axis(0);
        let err = (0..100)
            .flat_map(|i| (0..100).map(move |j| (i, j)))
            .map(|(i, j)| (f.values[0][(i, j)] - a1[i] * a1[i]).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
    }

    #[test]
    fn extrapolated_nodes_are_flagged() {
        let src = SimGrid::square(0.0, 1.0, 5).unwrap();
        let dst = SimGrid::new(vec![(0.0, 2.0), (0.0, 1.0)], vec![5, 3]).unwrap();
        let f = interpolate_field(&src, &samples_on(&src, |x| x[0]), &dst, 1.0).unwrap();
        assert!(!f.mask[(2, 1)]);
        assert!(f.mask[(3, 1)] && f.mask[(4, 0)]);
    }

    #[test]
    fn gradient_of_constant_is_zero_and_quadratic_is_exact() {
        let grid = SimGrid::square(-1.0, 1.0, 41).unwrap();
        let mut f = field_from(&grid, |x, y| vec![3.0, x * x + 0.5 * y]);
        gradient_central_diff(&mut f);
        let g = f.gradient.as_ref().unwrap();
        assert!(g[0][0].amax() == 0.0 && g[0][1].amax() == 0.0);
        let a = grid.axis(0);
        for i in 0..41 {
            for j in 0..41 {
                assert!((g[1][0][(i, j)] - 2.0 * a[i]).abs() < 1e-12);
                assert!((g[1][1][(i, j)] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn central_difference_error_bound_on_sine() {
        let h = 0.01;
        let grid = SimGrid::new(vec![(0.0, 2.0), (0.0, 0.02)], vec![201, 3]).unwrap();
        let mut f = field_from(&grid, |x, _| vec![x.sin()]);
        gradient_central_diff(&mut f);
        let g = &f.gradient.as_ref().unwrap()[0][0];
        let a = grid.axis(0);
        let err = (1..200).map(|i| (g[(i, 1)] - a[i].cos()).abs()).fold(0.0, f64::max);
        assert!(err <= h * h / 6.0, "{err}");
    }

    #[test]
    fn gradient_is_linear() {
        let grid = SimGrid::square(-1.0, 1.0, 15).unwrap();
        let mut u = field_from(&grid, |x, y| vec![(3.0 * x).sin() * y]);
        let mut v = field_from(&grid, |x, y| vec![x.exp() - y * y * y]);
        let mut w = field_from(&grid, |x, y| vec![2.0 * (3.0 * x).sin() * y - 0.5 * (x.exp() - y * y * y)]);
        for f in [&mut u, &mut v, &mut w] {
            gradient_central_diff(f);
        }
        for d in 0..2 {
            let lhs = &w.gradient.as_ref().unwrap()[0][d];
            let rhs = &u.gradient.as_ref().unwrap()[0][d] * 2.0 - &v.gradient.as_ref().unwrap()[0][d] * 0.5;
            assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn closure_eigenfunctions_have_vanishing_residual() {
        let sys = DynSystem::closure_default();
        let grid = SimGrid::square(-1.0, 1.0, 51).unwrap();
        let mut f = field_from(&grid, |x, y| vec![1.0, x, x * x, y - 1.25 * x * x]);
        gradient_central_diff(&mut f);
        let eigs = EigenvalueSet::new(vec![
            Eigenvalue::real(0.0),
            Eigenvalue::real(-0.1),
            Eigenvalue::real(-0.2),
            Eigenvalue::real(-1.0),
        ]);
        let drift = drift_on_grid(&sys, &grid).unwrap();
        let res = kpde_residual(&f, &eigs, &drift).unwrap();
        for r in &res {
            assert!(r.amax() < 1e-8, "{}", r.amax());
        }
        let opts = KpdeCostOptions::default();
        assert!(kpde_cost(&res, &f.mask, opts).unwrap() < 1e-16);
    }

    #[test]
    fn residual_needs_gradient() {
        let grid = SimGrid::square(-1.0, 1.0, 5).unwrap();
        let f = field_from(&grid, |_, _| vec![1.0]);
        let drift = vec![DMatrix::zeros(5, 5); 2];
        let eigs = EigenvalueSet::new(vec![Eigenvalue::real(0.0)]);
        assert!(matches!(kpde_residual(&f, &eigs, &drift), Err(Error::State(_))));
    }

    #[test]
    fn complex_pair_residual_uses_block_rotation() {
        // φ = r e^{iθ}-style pair for ẋ = Ax with A a rotation-dilation
        let (a, b) = (-0.3, 0.8);
        let sys = DynSystem::linear(DMatrix::from_row_slice(2, 2, &[a, -b, b, a]), DMatrix::zeros(2, 0));
        let grid = SimGrid::square(-1.0, 1.0, 21).unwrap();
        // the coordinates themselves evolve by the same rotation-dilation block
        let mut f = field_from(&grid, |x, y| vec![x, y]);
        gradient_central_diff(&mut f);
        let drift = drift_on_grid(&sys, &grid).unwrap();
        let eigs = EigenvalueSet::from_tuples(&[(a, b)]);
        let res = kpde_residual(&f, &eigs, &drift).unwrap();
        assert!(res.iter().all(|r| r.amax() < 1e-12));
    }

    #[test]
    fn kpde_cost_clamp_trim_and_empty() {
        let mask = DMatrix::from_element(4, 4, false);
        let r = vec![DMatrix::from_element(4, 4, 3.0)];
        let opts = KpdeCostOptions { clamp: Some(1.0), edge_trim: 0 };
        assert_eq!(kpde_cost(&r, &mask, opts).unwrap(), 1.0);
        let zero = vec![DMatrix::zeros(4, 4)];
        assert_eq!(kpde_cost(&zero, &mask, KpdeCostOptions::default()).unwrap(), 0.0);
        let all = DMatrix::from_element(4, 4, true);
        assert!(kpde_cost(&r, &all, KpdeCostOptions::default()).is_err());
    }

    #[test]
    fn indicator_levels_bimodal_and_unimodal() {
        let mut v: Vec<f64> = (0..500).map(|i| 1.0 + 1e-3 * (i % 7) as f64).collect();
        v.extend((0..400).map(|i| -1.0 - 1e-3 * (i % 5) as f64));
        v.extend((0..20).map(|i| -1.0 + 0.1 * i as f64));
        let lv = indicator_levels(&v).unwrap();
        assert!((lv.low + 1.0).abs() < 0.01 && (lv.high - 1.0).abs() < 0.01);
        assert!(lv.classify(0.5) && !lv.classify(-0.2));
        let single: Vec<f64> = (0..300).map(|i| 1.0 + 1e-4 * (i % 3) as f64).collect();
        assert!(indicator_levels(&single).is_none());
        let flat = vec![1.0; 100];
        assert!(indicator_levels(&flat).is_none());
    }

    #[test]
    fn single_basin_mask_is_empty() {
        let grid = SimGrid::square(-1.0, 1.0, 11).unwrap();
        let f = field_from(&grid, |_, _| vec![1.0]);
        let m = separatrix_mask(&f, 0, 0.2).unwrap();
        assert!(m.iter().all(|&b| !b));
    }
}
