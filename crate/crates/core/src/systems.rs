//! Benchmark vector fields, Heun integration and initial-condition grids.
//!
//! Trajectories are stored as dense `m × N` matrices. Whenever a trajectory
//! has to be seen as a single row vector (projection onto a temporal basis)
//! it is flattened *state-major*: all `N` samples of `x₁`, then all samples
//! of `x₂`, and so on. [`flatten_state_major`] is the only place this
//! convention is spelled out.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Family of a dynamical system together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SystemKind {
    /// `ẋ₁ = μx₁`, `ẋ₂ = ν(x₂ − x₁²)`; finite Koopman closure.
    Closure { mu: f64, nu: f64 },
    /// Control-affine FitzHugh–Nagumo with `G(x) = (1, cos x₁²)ᵀ`.
    #[serde(rename = "fitzhugh_nagumo")]
    FitzHughNagumo { alpha: f64, beta: f64, gamma: f64, delta: f64 },
    VanDerPol { mu: f64 },
    /// `ẋ₁ = x₂`, `ẋ₂ = −δx₂ − x₁(b + a x₁²)`.
    Duffing { delta: f64, a: f64, b: f64 },
    /// Two-state, two-input control-affine plant with a stable node at the
    /// origin and state-dependent input coupling.
    ControlSurrogate,
    /// `ẋ = A x + B u`.
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

/// A control-affine system `ẋ = F(x) + G(x) u`.
///
/// Evaluation is pure, so a system can be shared freely across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynSystem {
    pub name: String,
    pub kind: SystemKind,
    pub state_dim: usize,
    pub input_dim: usize,
    pub known_fixed_points: Vec<Vec<f64>>,
    /// Principal eigenvalues as `(re, im)` with `im ≥ 0` (one entry per pair).
    pub principal_eigenvalues: Vec<(f64, f64)>,
}

impl DynSystem {
    pub fn closure(mu: f64, nu: f64) -> Self {
        DynSystem {
            name: "closure".into(),
            kind: SystemKind::Closure { mu, nu },
            state_dim: 2,
            input_dim: 0,
            known_fixed_points: vec![vec![0.0, 0.0]],
            principal_eigenvalues: vec![(mu, 0.0), (nu, 0.0)],
        }
    }

    /// Closure system with `μ = −0.1`, `ν = −1`.
    pub fn closure_default() -> Self {
        Self::closure(-0.1, -1.0)
    }

    pub fn fitzhugh_nagumo(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Self {
        let kind = SystemKind::FitzHughNagumo { alpha, beta, gamma, delta };
        let fp = fhn_fixed_point(alpha, beta, gamma, delta);
        let mut sys = DynSystem {
            name: "fitzhugh_nagumo".into(),
            kind,
            state_dim: 2,
            input_dim: 1,
            known_fixed_points: vec![fp.clone()],
            principal_eigenvalues: vec![],
        };
        sys.principal_eigenvalues = principal_from_jacobian(&sys.jacobian(&fp));
        sys
    }

    /// FitzHugh–Nagumo with `α = 0.5`, `β = 0.05`, `γ = 0.2`, `δ = 1`.
    pub fn fitzhugh_nagumo_default() -> Self {
        Self::fitzhugh_nagumo(0.5, 0.05, 0.2, 1.0)
    }

    pub fn van_der_pol(mu: f64) -> Self {
        let mut sys = DynSystem {
            name: "van_der_pol".into(),
            kind: SystemKind::VanDerPol { mu },
            state_dim: 2,
            input_dim: 0,
            known_fixed_points: vec![vec![0.0, 0.0]],
            principal_eigenvalues: vec![],
        };
        sys.principal_eigenvalues = principal_from_jacobian(&sys.jacobian(&[0.0, 0.0]));
        sys
    }

    pub fn van_der_pol_default() -> Self {
        Self::van_der_pol(2.0)
    }

    pub fn duffing(delta: f64, a: f64, b: f64) -> Self {
        let mut fps = vec![vec![0.0, 0.0]];
        if -b / a > 0.0 {
            let r = (-b / a).sqrt();
            fps.push(vec![r, 0.0]);
            fps.push(vec![-r, 0.0]);
        }
        let mut sys = DynSystem {
            name: "duffing".into(),
            kind: SystemKind::Duffing { delta, a, b },
            state_dim: 2,
            input_dim: 0,
            known_fixed_points: fps,
            principal_eigenvalues: vec![],
        };
        // stable focus first, then the saddle's two real eigenvalues
        if sys.known_fixed_points.len() > 1 {
            let fp = sys.known_fixed_points[1].clone();
            sys.principal_eigenvalues = principal_from_jacobian(&sys.jacobian(&fp));
        }
        sys.principal_eigenvalues
            .extend(principal_from_jacobian(&sys.jacobian(&[0.0, 0.0])));
        sys
    }

    /// Duffing with `δ = 0.5`, `a = 1`, `b = −1`.
    pub fn duffing_default() -> Self {
        Self::duffing(0.5, 1.0, -1.0)
    }

    pub fn control_surrogate() -> Self {
        let mut sys = DynSystem {
            name: "control_surrogate".into(),
            kind: SystemKind::ControlSurrogate,
            state_dim: 2,
            input_dim: 2,
            known_fixed_points: vec![vec![0.0, 0.0]],
            principal_eigenvalues: vec![],
        };
        sys.principal_eigenvalues = principal_from_jacobian(&sys.jacobian(&[0.0, 0.0]));
        sys
    }

    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let m = a.nrows();
        let to_rows = |x: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
        };
        DynSystem {
            name: "linear".into(),
            state_dim: m,
            input_dim: b.ncols(),
            kind: SystemKind::Linear { a: to_rows(&a), b: to_rows(&b) },
            known_fixed_points: vec![vec![0.0; m]],
            principal_eigenvalues: vec![],
        }
    }

    /// Builds the system described by `kind`.
    pub fn from_kind(kind: &SystemKind) -> Result<Self> {
        Ok(match kind {
            SystemKind::Closure { mu, nu } => Self::closure(*mu, *nu),
            SystemKind::FitzHughNagumo { alpha, beta, gamma, delta } => {
                Self::fitzhugh_nagumo(*alpha, *beta, *gamma, *delta)
            }
            SystemKind::VanDerPol { mu } => Self::van_der_pol(*mu),
            SystemKind::Duffing { delta, a, b } => Self::duffing(*delta, *a, *b),
            SystemKind::ControlSurrogate => Self::control_surrogate(),
            SystemKind::Linear { a, b } => {
                let m = a.len();
                let p = b.first().map_or(0, |r| r.len());
                if m == 0 || a.iter().any(|r| r.len() != m) || b.len() != m || b.iter().any(|r| r.len() != p) {
                    return Err(Error::Config("linear system needs square A and B with one row per state".into()));
                }
                let a = DMatrix::from_fn(m, m, |i, j| a[i][j]);
                let b = DMatrix::from_fn(m, p, |i, j| b[i][j]);
                Self::linear(a, b)
            }
        })
    }

    /// Looks up a registered benchmark by name with its default parameters.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "closure" => Ok(Self::closure_default()),
            "fitzhugh_nagumo" | "fhn" => Ok(Self::fitzhugh_nagumo_default()),
            "van_der_pol" | "vdp" => Ok(Self::van_der_pol_default()),
            "duffing" => Ok(Self::duffing_default()),
            "control_surrogate" => Ok(Self::control_surrogate()),
            other => Err(Error::Config(format!("unknown system '{other}'"))),
        }
    }

    /// Writes `F(x)` into `out`.
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            SystemKind::Closure { mu, nu } => {
                out[0] = mu * x[0];
                out[1] = nu * (x[1] - x[0] * x[0]);
            }
            SystemKind::FitzHughNagumo { alpha, beta, gamma, delta } => {
                out[0] = -x[1] - x[0] * (x[0] - 1.0) * (x[0] - alpha) + beta;
                out[1] = gamma * (x[0] - delta * x[1]);
            }
            SystemKind::VanDerPol { mu } => {
                out[0] = x[1];
                out[1] = mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
            }
            SystemKind::Duffing { delta, a, b } => {
                out[0] = x[1];
                out[1] = -delta * x[1] - x[0] * (b + a * x[0] * x[0]);
            }
            SystemKind::ControlSurrogate => {
                out[0] = -x[0] + x[1] - 0.3 * x[0].powi(3);
                out[1] = -2.0 * x[1] + 0.5 * x[0] * x[0];
            }
            SystemKind::Linear { a, .. } => {
                for (o, row) in out.iter_mut().zip(a) {
                    *o = row.iter().zip(x).map(|(r, v)| r * v).sum();
                }
            }
        }
    }

    pub fn drift(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.state_dim);
        self.drift_into(x, out.as_mut_slice());
        out
    }

    /// `G(x)` as an `m × input_dim` matrix.
    pub fn input_field(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.kind {
            SystemKind::FitzHughNagumo { .. } => {
                DMatrix::from_column_slice(2, 1, &[1.0, (x[0] * x[0]).cos()])
            }
            SystemKind::ControlSurrogate => DMatrix::from_row_slice(
                2,
                2,
                &[
                    1.0 + 0.2 * x[0] * x[0],
                    0.1,
                    0.1 * x[0],
                    0.5 + 0.2 * x[1].tanh(),
                ],
            ),
            SystemKind::Linear { b, .. } => {
                DMatrix::from_fn(self.state_dim, self.input_dim, |i, j| b[i][j])
            }
            _ => DMatrix::zeros(self.state_dim, self.input_dim),
        }
    }

    /// `F(x) + G(x) u` written into `out`.
    pub fn vector_field_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.drift_into(x, out);
        if self.input_dim > 0 && u.iter().any(|&v| v != 0.0) {
            let g = self.input_field(x);
            for i in 0..self.state_dim {
                for j in 0..self.input_dim {
                    out[i] += g[(i, j)] * u[j];
                }
            }
        }
    }

    /// Jacobian of the drift by central differences.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let m = self.state_dim;
        let h = 1e-6;
        let mut jac = DMatrix::zeros(m, m);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        for j in 0..m {
            xp[j] = x[j] + h;
            self.drift_into(&xp, &mut fp);
            xp[j] = x[j] - h;
            self.drift_into(&xp, &mut fm);
            xp[j] = x[j];
            for i in 0..m {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }
}

fn fhn_fixed_point(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Vec<f64> {
    let _ = gamma;
    // x₂ = x₁/δ, then −x₁/δ − x₁(x₁−1)(x₁−α) + β = 0; Newton from 0
    let f = |x: f64| -x / delta - x * (x - 1.0) * (x - alpha) + beta;
    let df = |x: f64| -1.0 / delta - (3.0 * x * x - 2.0 * (1.0 + alpha) * x + alpha);
    let mut x = 0.0;
    for _ in 0..100 {
        let step = f(x) / df(x);
        x -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    vec![x, x / delta]
}

/// Eigenvalues of a Jacobian as `(re, im ≥ 0)`, one entry per conjugate pair.
fn principal_from_jacobian(jac: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for ev in jac.complex_eigenvalues().iter() {
        if ev.im < -1e-12 {
            continue;
        }
        let im = if ev.im.abs() < 1e-12 { 0.0 } else { ev.im };
        out.push((ev.re, im));
    }
    out
}

/// One Heun (explicit trapezoidal) step of `ẋ = F(x) + G(x)u`.
pub fn heun_step(sys: &DynSystem, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    heun_step_into(sys, x, u, dt, &mut out, &mut vec![0.0; 3 * x.len()])
        .then_some(())
        .ok_or(Error::IntegrationOverflow { trajectory: 0, step: 0 })?;
    Ok(out)
}

/// Heun step using caller-provided scratch (`3m` entries). Returns `false` if
/// any intermediate value is non-finite.
fn heun_step_into(
    sys: &DynSystem,
    x: &[f64],
    u: &[f64],
    dt: f64,
    out: &mut [f64],
    scratch: &mut [f64],
) -> bool {
    let m = x.len();
    let (k1, rest) = scratch.split_at_mut(m);
    let (xp, k2) = rest.split_at_mut(m);
    sys.vector_field_into(x, u, k1);
    for i in 0..m {
        xp[i] = x[i] + dt * k1[i];
    }
    sys.vector_field_into(xp, u, k2);
    let mut ok = true;
    for i in 0..m {
        out[i] = x[i] + 0.5 * dt * (k1[i] + k2[i]);
        ok &= out[i].is_finite() && k1[i].is_finite() && k2[i].is_finite();
    }
    ok
}

/// Integrates `n_samples` samples (including the initial one) with a constant
/// or time-varying input. `input(k)` returns `u` at step `k`.
pub fn integrate<U>(
    sys: &DynSystem,
    x0: &[f64],
    dt: f64,
    n_samples: usize,
    trajectory: usize,
    input: U,
) -> Result<DMatrix<f64>>
where
    U: Fn(usize) -> Vec<f64>,
{
    let m = sys.state_dim;
    if x0.len() != m {
        return Err(Error::Dimension(format!("initial state has {} entries, system has {m}", x0.len())));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let mut states = DMatrix::zeros(m, n_samples);
    let mut x = x0.to_vec();
    let mut next = vec![0.0; m];
    let mut scratch = vec![0.0; 3 * m];
    let zero_u = vec![0.0; sys.input_dim];
    for k in 0..n_samples {
        states.column_mut(k).copy_from_slice(&x);
        if k + 1 == n_samples {
            break;
        }
        let u = if sys.input_dim > 0 { input(k) } else { zero_u.clone() };
        if !heun_step_into(sys, &x, &u, dt, &mut next, &mut scratch) {
            return Err(Error::IntegrationOverflow { trajectory, step: k });
        }
        std::mem::swap(&mut x, &mut next);
    }
    Ok(states)
}

/// Rule selecting the trajectories used in the temporal cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgridRule {
    pub offset: usize,
    pub step: usize,
}

impl SubgridRule {
    /// Every node.
    pub const ALL: SubgridRule = SubgridRule { offset: 0, step: 1 };
    /// Odd rows and columns (1-based), i.e. every second node.
    pub const ODD: SubgridRule = SubgridRule { offset: 0, step: 2 };
    /// Every second of the odd rows and columns: 21 × 21 → 6 × 6.
    pub const EVERY_SECOND_ODD: SubgridRule = SubgridRule { offset: 0, step: 4 };
}

impl Default for SubgridRule {
    fn default() -> Self {
        SubgridRule::EVERY_SECOND_ODD
    }
}

/// Regular rectangular grid of initial conditions.
///
/// Node `idx` enumerates the grid with the *last* dimension varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGrid {
    pub ranges: Vec<(f64, f64)>,
    pub counts: Vec<usize>,
    #[serde(default)]
    pub subgrid: SubgridRule,
}

impl SimGrid {
    pub fn new(ranges: Vec<(f64, f64)>, counts: Vec<usize>) -> Result<Self> {
        let g = SimGrid { ranges, counts, subgrid: SubgridRule::default() };
        g.validate()?;
        Ok(g)
    }

    /// Square 2-D grid `[lo, hi]²` with `n × n` nodes.
    pub fn square(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![(lo, hi), (lo, hi)], vec![n, n])
    }

    pub fn with_subgrid(mut self, rule: SubgridRule) -> Self {
        self.subgrid = rule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.len() != self.counts.len() || self.ranges.is_empty() {
            return Err(Error::Config("grid ranges and counts must have equal, nonzero length".into()));
        }
        for (d, (&(lo, hi), &n)) in self.ranges.iter().zip(&self.counts).enumerate() {
            if !(lo < hi) {
                return Err(Error::Config(format!("grid dimension {d}: lo {lo} must be < hi {hi}")));
            }
            if n < 2 {
                return Err(Error::Config(format!("grid dimension {d}: need at least 2 points, got {n}")));
            }
        }
        if self.subgrid.step == 0 {
            return Err(Error::Config("subgrid step must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, d: usize) -> f64 {
        let (lo, hi) = self.ranges[d];
        (hi - lo) / (self.counts[d] - 1) as f64
    }

    pub fn axis(&self, d: usize) -> Vec<f64> {
        let (lo, hi) = self.ranges[d];
        let n = self.counts[d];
        (0..n)
            .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect()
    }

    /// Multi-index of node `idx`.
    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            out[d] = idx % self.counts[d];
            idx /= self.counts[d];
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.counts).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(d, &i)| {
                let (lo, hi) = self.ranges[d];
                let n = self.counts[d];
                if i + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    /// Index of the node coinciding with `x` (within a small tolerance).
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut multi = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            let (lo, _) = self.ranges[d];
            let h = self.spacing(d);
            let f = (x[d] - lo) / h;
            let i = f.round();
            if (f - i).abs() > 1e-6 || i < 0.0 || i as usize >= self.counts[d] {
                return None;
            }
            multi.push(i as usize);
        }
        Some(self.flat_index(&multi))
    }

    /// Whether `x` lies inside the grid's bounding box.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.ranges)
            .all(|(&v, &(lo, hi))| v >= lo - 1e-12 && v <= hi + 1e-12)
    }
}

/// Selects the temporal-cost trajectories according to the grid's rule.
pub fn select_subgrid(grid: &SimGrid) -> Result<Vec<usize>> {
    let rule = grid.subgrid;
    if rule.step == 0 {
        return Err(Error::Config("subgrid step must be ≥ 1".into()));
    }
    let per_dim: Vec<Vec<usize>> = grid
        .counts
        .iter()
        .map(|&n| (rule.offset..n).step_by(rule.step).collect())
        .collect();
    if per_dim.iter().any(|v| v.is_empty()) {
        return Err(Error::Config(format!(
            "subgrid offset {} exceeds grid counts {:?}",
            rule.offset, grid.counts
        )));
    }
    let mut out = vec![];
    let mut multi = vec![0usize; grid.dim()];
    loop {
        let node: Vec<usize> = multi.iter().enumerate().map(|(d, &k)| per_dim[d][k]).collect();
        out.push(grid.flat_index(&node));
        let mut d = grid.dim();
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            multi[d] += 1;
            if multi[d] < per_dim[d].len() {
                break;
            }
            multi[d] = 0;
        }
    }
}

/// Post-integration additive Gaussian measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub variance: f64,
    pub seed: u64,
}

/// Autonomous trajectories sampled from a grid of initial conditions.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub dt: f64,
    pub n_samples: usize,
    /// `n_t` initial states, equal to the first column of each trajectory.
    pub initial_conditions: Vec<Vec<f64>>,
    /// `n_t` blocks of `m × N`.
    pub states: Vec<DMatrix<f64>>,
    pub reference_index: usize,
    /// Grid the trajectories were launched from (nominal, unshifted nodes).
    pub grid: SimGrid,
    /// Offset subtracted by [`TrajectoryEnsemble::shift_by`].
    pub shift: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.nrows())
    }

    /// `kΔt`, `k = 0..N−1`.
    pub fn time_axis(&self) -> Vec<f64> {
        time_axis(self.dt, self.n_samples)
    }

    pub fn reference(&self) -> &DMatrix<f64> {
        &self.states[self.reference_index]
    }

    /// Copy of the ensemble with `offset` subtracted from every sample.
    pub fn shift_by(&self, offset: &[f64]) -> TrajectoryEnsemble {
        let off = DVector::from_column_slice(offset);
        let states = self
            .states
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for mut col in s.column_iter_mut() {
                    col -= &off;
                }
                s
            })
            .collect();
        let initial_conditions = self
            .initial_conditions
            .iter()
            .map(|x| x.iter().zip(offset).map(|(a, b)| a - b).collect())
            .collect();
        let shift = self.shift.iter().zip(offset).map(|(a, b)| a + b).collect();
        TrajectoryEnsemble { states, initial_conditions, shift, ..self.clone() }
    }

    /// Same ensemble with a different reference trajectory.
    pub fn with_reference(&self, reference_ic: &[f64]) -> Result<TrajectoryEnsemble> {
        let idx = self
            .grid
            .locate(reference_ic)
            .ok_or_else(|| Error::Config(format!("reference {reference_ic:?} is not a grid node")))?;
        Ok(TrajectoryEnsemble { reference_index: idx, ..self.clone() })
    }
}

pub fn time_axis(dt: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * dt).collect()
}

/// State-major flattening of an `m × N` block into a length-`mN` vector.
pub fn flatten_state_major(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.transpose().as_slice())
}

/// Simulates one autonomous trajectory per grid node.
pub fn simulate_ensemble(
    sys: &DynSystem,
    grid: &SimGrid,
    dt: f64,
    n_samples: usize,
    reference_ic: &[f64],
    noise: Option<NoiseSpec>,
) -> Result<TrajectoryEnsemble> {
    grid.validate()?;
    if grid.dim() != sys.state_dim {
        return Err(Error::Dimension(format!(
            "grid is {}-D but system '{}' has {} states",
            grid.dim(),
            sys.name,
            sys.state_dim
        )));
    }
    if n_samples < 2 {
        return Err(Error::Config("need at least two samples per trajectory".into()));
    }
    let reference_index = grid.locate(reference_ic).ok_or_else(|| {
        Error::Config(format!("reference initial condition {reference_ic:?} is not on the grid"))
    })?;
    let mut states = par::try_map_range(grid.len(), |i| {
        integrate(sys, &grid.point(i), dt, n_samples, i, |_| vec![0.0; sys.input_dim])
    })?;
    if let Some(spec) = noise {
        if spec.variance < 0.0 {
            return Err(Error::Config("noise variance must be nonnegative".into()));
        }
        if spec.variance > 0.0 {
            let normal = Normal::new(0.0, spec.variance.sqrt()).expect("finite std");
            for (i, s) in states.iter_mut().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(i as u64);
                for v in s.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
    }
    let initial_conditions = states.iter().map(|s| s.column(0).iter().copied().collect()).collect();
    Ok(TrajectoryEnsemble {
        dt,
        n_samples,
        initial_conditions,
        states,
        reference_index,
        grid: grid.clone(),
        shift: vec![0.0; sys.state_dim],
    })
}

/// Input excitation for driven (validation) runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputSignal {
    /// Level `values[k]` held for `hold` seconds each; the last level persists.
    PiecewiseConstant { hold: f64, values: Vec<Vec<f64>> },
    /// One sample per integration step; the last sample persists.
    Sampled { values: Vec<Vec<f64>> },
}

impl InputSignal {
    /// Random piecewise-constant levels, uniform in `[−amplitude, amplitude]`.
    pub fn random_steps(input_dim: usize, amplitude: f64, hold: f64, duration: f64, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (duration / hold).ceil().max(1.0) as usize;
        let values = (0..n)
            .map(|_| (0..input_dim).map(|_| rng.gen_range(-amplitude..=amplitude)).collect())
            .collect();
        InputSignal::PiecewiseConstant { hold, values }
    }

    pub fn at(&self, t: f64, step: usize) -> Vec<f64> {
        match self {
            InputSignal::PiecewiseConstant { hold, values } => {
                let k = ((t + 1e-9) / hold).floor().max(0.0) as usize;
                values[k.min(values.len() - 1)].clone()
            }
            InputSignal::Sampled { values } => values[step.min(values.len() - 1)].clone(),
        }
    }

    /// Samples the signal on the step grid `kΔt`, `k = 0..n−1`, as `p × n`.
    pub fn sample(&self, dt: f64, n: usize, input_dim: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(input_dim, n);
        for k in 0..n {
            let u = self.at(k as f64 * dt, k);
            for j in 0..input_dim {
                out[(j, k)] = u[j];
            }
        }
        out
    }
}

/// Integrates an input-driven trajectory; returns `(states m × N, inputs p × N)`.
pub fn simulate_driven(
    sys: &DynSystem,
    x0: &[f64],
    input: &InputSignal,
    dt: f64,
    n_samples: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let u = input.sample(dt, n_samples, sys.input_dim);
    let states = integrate(sys, x0, dt, n_samples, 0, |k| u.column(k).iter().copied().collect())?;
    Ok((states, u))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_system() -> DynSystem {
        DynSystem::linear(DMatrix::zeros(2, 2), DMatrix::zeros(2, 0))
    }

    #[test]
    fn heun_on_zero_field_is_identity() {
        let x = heun_step(&zero_system(), &[1.0, 2.0], &[], 0.2).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn heun_scalar_decay_matches_hand_expansion() {
        let sys = DynSystem::linear(DMatrix::from_element(1, 1, -1.0), DMatrix::zeros(1, 0));
        let x = heun_step(&sys, &[1.0], &[], 0.1).unwrap();
        assert!((x[0] - 0.905).abs() < 1e-15);
    }

    #[test]
    fn heun_closure_step_halving_agrees_to_third_order() {
        let sys = DynSystem::closure_default();
        let full = heun_step(&sys, &[1.0, 1.0], &[], 0.2).unwrap();
        let half = heun_step(&sys, &[1.0, 1.0], &[], 0.1).unwrap();
        let half = heun_step(&sys, &half, &[], 0.1).unwrap();
        let diff = ((full[0] - half[0]).powi(2) + (full[1] - half[1]).powi(2)).sqrt();
        // local error is O(dt³); dt³ = 8e-3 with an O(1) constant
        assert!(diff < 0.2f64.powi(3), "diff {diff}");
        assert!(diff > 0.0);
    }

    #[test]
    fn overflow_reports_trajectory_and_step() {
        let sys = DynSystem::linear(DMatrix::from_element(1, 1, 1e200), DMatrix::zeros(1, 0));
        let err = integrate(&sys, &[1e200], 1.0, 10, 7, |_| vec![]).unwrap_err();
        assert!(matches!(err, Error::IntegrationOverflow { trajectory: 7, step: 0 }));
    }

    #[test]
    fn fixed_points_are_equilibria() {
        for sys in [
            DynSystem::closure_default(),
            DynSystem::fitzhugh_nagumo_default(),
            DynSystem::van_der_pol_default(),
            DynSystem::duffing_default(),
            DynSystem::control_surrogate(),
        ] {
            for fp in &sys.known_fixed_points {
                assert!(sys.drift(fp).norm() < 1e-8, "{} at {fp:?}", sys.name);
            }
        }
    }

    #[test]
    fn benchmark_parameters_and_principal_eigenvalues() {
        let fhn = DynSystem::fitzhugh_nagumo_default();
        let fp = &fhn.known_fixed_points[0];
        assert!((fp[0] - 0.0345).abs() < 5e-4 && (fp[1] - 0.0345).abs() < 5e-4, "{fp:?}");
        let (re, im) = fhn.principal_eigenvalues[0];
        assert!((re + 0.3).abs() < 0.01 && (im - 0.436).abs() < 0.01, "{re} {im}");

        let duf = DynSystem::duffing_default();
        let (re, im) = duf.principal_eigenvalues[0];
        assert!((re + 0.25).abs() < 1e-6 && (im - 7.75f64.sqrt() / 2.0).abs() < 1e-6);
        let mut saddle: Vec<f64> = duf.principal_eigenvalues[1..].iter().map(|e| e.0).collect();
        saddle.sort_by(f64::total_cmp);
        assert!((saddle[0] + 1.281).abs() < 1e-3 && (saddle[1] - 0.781).abs() < 1e-3);

        assert_eq!(DynSystem::closure_default().kind, SystemKind::Closure { mu: -0.1, nu: -1.0 });
        assert_eq!(DynSystem::van_der_pol_default().kind, SystemKind::VanDerPol { mu: 2.0 });
    }

    #[test]
    fn input_field_shapes() {
        for sys in [DynSystem::fitzhugh_nagumo_default(), DynSystem::control_surrogate(), DynSystem::duffing_default()] {
            for x in [[0.0, 0.0], [1.3, -0.7]] {
                let g = sys.input_field(&x);
                assert_eq!((g.nrows(), g.ncols()), (sys.state_dim, sys.input_dim));
            }
        }
    }

    #[test]
    fn subgrid_rules() {
        let g21 = SimGrid::square(-1.0, 1.0, 21).unwrap();
        assert_eq!(select_subgrid(&g21).unwrap().len(), 36);
        let all = select_subgrid(&g21.clone().with_subgrid(SubgridRule::ALL)).unwrap();
        assert_eq!(all, (0..441).collect::<Vec<_>>());
        let g5 = SimGrid::square(-1.0, 1.0, 5).unwrap().with_subgrid(SubgridRule::ODD);
        assert_eq!(select_subgrid(&g5).unwrap(), vec![0, 2, 4, 10, 12, 14, 20, 22, 24]);
    }

    #[test]
    fn grid_indexing_round_trips() {
        let g = SimGrid::new(vec![(0.0, 2.0), (-2.0, 2.0)], vec![21, 11]).unwrap();
        for idx in [0, 5, 37, 230] {
            let p = g.point(idx);
            assert_eq!(g.locate(&p), Some(idx));
        }
        assert_eq!(g.locate(&[0.05, 0.0]), None);
    }

    #[test]
    fn zero_field_ensemble_is_constant() {
        let grid = SimGrid::square(0.0, 1.0, 2).unwrap();
        let ens = simulate_ensemble(&zero_system(), &grid, 0.1, 5, &[0.0, 0.0], None).unwrap();
        assert_eq!(ens.len(), 4);
        for (s, x0) in ens.states.iter().zip(&ens.initial_conditions) {
            for col in s.column_iter() {
                assert_eq!(col.as_slice(), x0.as_slice());
            }
        }
    }

    #[test]
    fn reference_must_be_on_grid() {
        let grid = SimGrid::square(0.0, 1.0, 3).unwrap();
        let err = simulate_ensemble(&zero_system(), &grid, 0.1, 5, &[0.3, 0.0], None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn shift_is_pure() {
        let sys = DynSystem::fitzhugh_nagumo_default();
        let grid = SimGrid::square(-1.0, 1.5, 3).unwrap();
        let ens = simulate_ensemble(&sys, &grid, 0.1, 10, &[-1.0, -1.0], None).unwrap();
        let fp = sys.known_fixed_points[0].clone();
        let shifted = ens.shift_by(&fp);
        assert!((shifted.states[0][(0, 3)] + fp[0] - ens.states[0][(0, 3)]).abs() < 1e-15);
        assert_eq!(shifted.grid, ens.grid);
        assert_eq!(ens.shift, vec![0.0, 0.0]);
    }

    #[test]
    fn flattening_is_state_major() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(flatten_state_major(&x).as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
