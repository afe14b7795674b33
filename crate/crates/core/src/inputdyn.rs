//! Lifted input dynamics `Γ(x) = ∇Φ(x)·G(x)` and the eigenfunction LPV
//! predictor `Φ̇ = ΛΦ + Γ(x̂)u`, `x̂ = C_ref Φ`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::par;
use crate::spatial::{bilinear_weights, EigenfunctionField};
use crate::spectral::EigenvalueSet;
use crate::systems::{DynSystem, SimGrid};

/// `∇Φ·G` sampled on the nodes of a refined field.
#[derive(Debug, Clone)]
pub struct LiftedInputField {
    pub grid: SimGrid,
    /// `values[φ][j]` is the `n₁ × n₂` field of entry `(φ, j)`.
    pub values: Vec<Vec<DMatrix<f64>>>,
    pub mask: DMatrix<bool>,
    pub input_dim: usize,
}

impl LiftedInputField {
    pub fn n_phi(&self) -> usize {
        self.values.len()
    }

    /// `Γ` at node `(i, j)`.
    pub fn node(&self, i: usize, j: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_phi(), self.input_dim, |r, c| self.values[r][c][(i, j)])
    }

    /// Unmasked nodes as training pairs: states (`m × n`) and flattened
    /// targets (`n_φ·p × n`, row index `φ·p + j`). Every `stride`-th node
    /// along each axis is kept.
    pub fn training_set(&self, stride: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let stride = stride.max(1);
        let (a1, a2) = (self.grid.axis(0), self.grid.axis(1));
        let mut nodes = vec![];
        for i in (0..a1.len()).step_by(stride) {
            for j in (0..a2.len()).step_by(stride) {
                if !self.mask[(i, j)] {
                    nodes.push((i, j));
                }
            }
        }
        let q = self.n_phi() * self.input_dim;
        let x = DMatrix::from_fn(2, nodes.len(), |d, k| if d == 0 { a1[nodes[k].0] } else { a2[nodes[k].1] });
        let y = DMatrix::from_fn(q, nodes.len(), |r, k| {
            self.values[r / self.input_dim][r % self.input_dim][(nodes[k].0, nodes[k].1)]
        });
        (x, y)
    }
}

/// Lifts the input field: per node, `(∇Φ₀)·G(x)`.
pub fn lifted_input_samples(field: &EigenfunctionField, sys: &DynSystem) -> Result<LiftedInputField> {
    let grad = field
        .gradient
        .as_ref()
        .ok_or_else(|| Error::State("lifted input dynamics need the eigenfunction gradient".into()))?;
    if sys.state_dim != 2 {
        return Err(Error::Dimension("lifted input dynamics support 2-D systems only".into()));
    }
    let p = sys.input_dim;
    let (a1, a2) = (field.grid.axis(0), field.grid.axis(1));
    let (n1, n2) = field.shape();
    // G at every node, stored per (state, input) entry
    let g: Vec<DMatrix<f64>> = {
        let nodes = par::map_range(n1, |i| (0..n2).map(|j| sys.input_field(&[a1[i], a2[j]])).collect::<Vec<_>>());
        (0..2 * p)
            .map(|e| DMatrix::from_fn(n1, n2, |i, j| nodes[i][j][(e / p, e % p)]))
            .collect()
    };
    let values = par::map_range(field.n_phi(), |r| {
        (0..p)
            .map(|c| {
                let mut v = grad[r][0].component_mul(&g[c]) + grad[r][1].component_mul(&g[p + c]);
                v.zip_apply(&field.mask, |x, m| {
                    if m {
                        *x = 0.0
                    }
                });
                v
            })
            .collect()
    });
    Ok(LiftedInputField { grid: field.grid.clone(), values, mask: field.mask.clone(), input_dim: p })
}

/// State-dependent input coupling `Γ(x)` (`n_φ × p`).
pub trait InputDynamics: Send + Sync {
    fn gamma(&self, x: &[f64]) -> DMatrix<f64>;

    /// Whether `x` lies inside the region the model was built on.
    fn in_hull(&self, _x: &[f64]) -> bool {
        true
    }
}

/// Bilinear interpolation of a [`LiftedInputField`].
#[derive(Debug, Clone)]
pub struct GridInputDynamics {
    pub field: LiftedInputField,
}

impl InputDynamics for GridInputDynamics {
    fn gamma(&self, x: &[f64]) -> DMatrix<f64> {
        let w = bilinear_weights(&self.field.grid, x);
        let f = &self.field;
        DMatrix::from_fn(f.n_phi(), f.input_dim, |r, c| w.apply(&f.values[r][c]))
    }

    fn in_hull(&self, x: &[f64]) -> bool {
        self.field.grid.contains(x)
    }
}

/// State-independent coupling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantInputDynamics(pub DMatrix<f64>);

impl InputDynamics for ConstantInputDynamics {
    fn gamma(&self, _x: &[f64]) -> DMatrix<f64> {
        self.0.clone()
    }
}

/// Adds `rows` zero rows on top of an inner coupling, for eigenfunctions
/// with vanishing gradient (the conservative mode).
pub struct PrependZeroRows<D> {
    pub inner: D,
    pub rows: usize,
}

impl<D: InputDynamics> InputDynamics for PrependZeroRows<D> {
    fn gamma(&self, x: &[f64]) -> DMatrix<f64> {
        let g = self.inner.gamma(x);
        let mut out = DMatrix::zeros(g.nrows() + self.rows, g.ncols());
        out.rows_mut(self.rows, g.nrows()).copy_from(&g);
        out
    }

    fn in_hull(&self, x: &[f64]) -> bool {
        self.inner.in_hull(x)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Single-hidden-layer sigmoid model `W₂σ(w₁x + b₁) + B₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidSurrogate {
    /// `h × m` hidden weights.
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `q × h` output weights, `q = n_φ·p`.
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub n_phi: usize,
    pub input_dim: usize,
    /// Bounding box of the training states.
    pub hull: Vec<(f64, f64)>,
}

impl SigmoidSurrogate {
    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    /// `σ(w₁x + b₁)` for one state.
    pub fn features(&self, x: &[f64]) -> DVector<f64> {
        let xv = DVector::from_column_slice(x);
        (&self.w1 * xv + &self.b1).map(sigmoid)
    }

    /// Features of many states (`m × n` in, `h × n` out).
    pub fn features_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w1 * x;
        for mut col in z.column_iter_mut() {
            col += &self.b1;
        }
        z.map(sigmoid)
    }

    /// Flattened outputs (`q × n`).
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.w2 * self.features_batch(x);
        for mut col in y.column_iter_mut() {
            col += &self.b2;
        }
        y
    }

    pub fn mse(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        (self.predict_batch(x) - y).norm_squared() / y.len().max(1) as f64
    }
}

impl InputDynamics for SigmoidSurrogate {
    fn gamma(&self, x: &[f64]) -> DMatrix<f64> {
        let y = &self.w2 * self.features(x) + &self.b2;
        DMatrix::from_fn(self.n_phi, self.input_dim, |r, c| y[r * self.input_dim + c])
    }

    fn in_hull(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.hull).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// Two-stage surrogate training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSettings {
    pub hidden: usize,
    pub ridge_weight: f64,
    /// Standard deviation of the random hidden weights, in units of the
    /// inverse per-axis data spread.
    pub weight_scale: f64,
    /// Adaptive-moment iterations (0 disables the refinement stage).
    pub adam_iters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        SurrogateSettings {
            hidden: 15,
            ridge_weight: 1e-8,
            weight_scale: 4.0,
            adam_iters: 3000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

/// Fitted surrogate and its training errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateFit {
    pub model: SigmoidSurrogate,
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Random sigmoid features with a ridge output layer, optionally refined by
/// full-batch adaptive-moment descent on the hidden layer (the output layer
/// stays at its ridge optimum throughout).
///
/// `x` is `m × n` (states), `y` is `q × n` (flattened `Γ` entries).
pub fn fit_sigmoid_surrogate(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    n_phi: usize,
    input_dim: usize,
    settings: &SurrogateSettings,
) -> Result<SurrogateFit> {
    let (m, n) = x.shape();
    let h = settings.hidden;
    if h == 0 {
        return Err(Error::Config("surrogate needs at least one hidden unit".into()));
    }
    if y.ncols() != n || y.nrows() != n_phi * input_dim {
        return Err(Error::Dimension(format!(
            "targets are {}×{}, expected {}×{n}",
            y.nrows(),
            y.ncols(),
            n_phi * input_dim
        )));
    }
    if n < 2 * h {
        return Err(Error::InsufficientData { needed: 2 * h, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let hull: Vec<(f64, f64)> = (0..m)
        .map(|d| x.row(d).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
        .collect();
    // stage (a): hidden units centered on training states
    let mut w1 = DMatrix::zeros(h, m);
    let mut b1 = DVector::zeros(h);
    for k in 0..h {
        let c = x.column(rng.gen_range(0..n)).clone_owned();
        for d in 0..m {
            let spread = (hull[d].1 - hull[d].0).max(1e-12);
            let g: f64 = rng.sample(StandardNormal);
            w1[(k, d)] = settings.weight_scale * g / spread;
        }
        b1[k] = -(w1.row(k) * &c)[0];
    }
    let mut model = SigmoidSurrogate {
        w1,
        b1,
        w2: DMatrix::zeros(y.nrows(), h),
        b2: DVector::zeros(y.nrows()),
        n_phi,
        input_dim,
        hull,
    };
    let feats = model.features_batch(x);
    let (w2, b2) = linalg::ridge_with_intercept(&feats, y, settings.ridge_weight)?;
    model.w2 = w2;
    model.b2 = b2;
    let initial_mse = model.mse(x, y);
    if settings.adam_iters == 0 || initial_mse == 0.0 {
        return Ok(SurrogateFit { model, initial_mse, final_mse: initial_mse });
    }

    // stage (b): Adam on the hidden layer; the output layer is re-solved by
    // ridge at every iterate, so each step descends the reduced MSE
    let stage_a = model.clone();
    let mut best = model.clone();
    let mut best_mse = initial_mse;
    let n_hidden_params = h * m + h;
    let mut mom = vec![0.0; n_hidden_params];
    let mut vel = vec![0.0; n_hidden_params];
    let scale = 2.0 / y.len() as f64;
    let (b1c, b2c) = (settings.beta1, settings.beta2);
    for it in 1..=settings.adam_iters {
        let z = model.features_batch(x);
        let (w2, b2) = match linalg::ridge_with_intercept(&z, y, settings.ridge_weight) {
            Ok(v) => v,
            Err(_) => break,
        };
        model.w2 = w2;
        model.b2 = b2;
        let mut pred = &model.w2 * &z;
        for mut col in pred.column_iter_mut() {
            col += &model.b2;
        }
        let err = pred - y;
        let mse = err.norm_squared() / y.len() as f64;
        if !mse.is_finite() || mse > 10.0 * initial_mse {
            warn!("surrogate refinement diverged at iteration {it}; keeping the random-feature fit");
            return Ok(SurrogateFit { model: stage_a, initial_mse, final_mse: initial_mse });
        }
        if mse < best_mse {
            best_mse = mse;
            best = model.clone();
        }
        let d_out = &err * scale; // q × n
        let d_z = model.w2.transpose() * &d_out; // h × n
        let d_pre = d_z.zip_map(&z, |g, s| g * s * (1.0 - s));
        let g_w1 = &d_pre * x.transpose();
        let g_b1 = d_pre.column_sum();
        let grads: Vec<f64> = g_w1.iter().chain(g_b1.iter()).copied().collect();
        let params: Vec<&mut f64> = model.w1.iter_mut().chain(model.b1.iter_mut()).collect();
        let c1 = 1.0 - b1c.powi(it as i32);
        let c2 = 1.0 - b2c.powi(it as i32);
        for (k, p) in params.into_iter().enumerate() {
            mom[k] = b1c * mom[k] + (1.0 - b1c) * grads[k];
            vel[k] = b2c * vel[k] + (1.0 - b2c) * grads[k] * grads[k];
            *p -= settings.learning_rate * (mom[k] / c1) / ((vel[k] / c2).sqrt() + 1e-8);
        }
    }
    if let Ok((w2, b2)) = linalg::ridge_with_intercept(&model.features_batch(x), y, settings.ridge_weight) {
        model.w2 = w2;
        model.b2 = b2;
        let last = model.mse(x, y);
        if last < best_mse {
            best_mse = last;
            best = model;
        }
    }
    Ok(SurrogateFit { model: best, initial_mse, final_mse: best_mse })
}

/// Linear-in-eigenfunctions predictor with state-scheduled input coupling.
pub struct LpvModel<'a> {
    pub eigs: &'a EigenvalueSet,
    /// `m × n_φ`.
    pub c_ref: &'a DMatrix<f64>,
    /// Added to `C_ref Φ` (zero when the conservative mode carries the offset).
    pub offset: DVector<f64>,
    pub dynamics: &'a dyn InputDynamics,
}

impl LpvModel<'_> {
    pub fn output(&self, phi: &DVector<f64>) -> DVector<f64> {
        self.c_ref * phi + &self.offset
    }

    /// `Φ̇ = ΛΦ + Γ(C_ref Φ)u`.
    pub fn phi_dot(&self, phi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let x = self.output(phi);
        let lam = self.eigs.apply_lambda(&DMatrix::from_column_slice(phi.len(), 1, phi.as_slice()));
        let mut d = DVector::from_column_slice(lam.as_slice());
        if u.len() > 0 {
            d += self.dynamics.gamma(x.as_slice()) * u;
        }
        d
    }

    /// One Heun step with the input held over the step.
    pub fn step(&self, phi: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
        let k1 = self.phi_dot(phi, u);
        let pred = phi + &k1 * dt;
        let k2 = self.phi_dot(&pred, u);
        phi + (k1 + k2) * (0.5 * dt)
    }
}

/// Predicted states (`m × N`) for inputs `u` (`p × N`, column `k` held over
/// step `k`), starting from `Φ_init`.
pub fn predict_lpv(model: &LpvModel<'_>, phi_init: &DVector<f64>, u: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = u.ncols();
    let m = model.c_ref.nrows();
    let mut out = DMatrix::zeros(m, n);
    let mut phi = phi_init.clone();
    let mut warned = false;
    for k in 0..n {
        let x = model.output(&phi);
        if !warned && !model.dynamics.in_hull(x.as_slice()) {
            warn!("prediction left the input-dynamics training region at step {k}");
            warned = true;
        }
        out.set_column(k, &x);
        if k + 1 < n {
            phi = model.step(&phi, &u.column(k).clone_owned(), dt);
        }
    }
    out
}

/// `Σ_states mean_t |x − x̂|`.
pub fn sum_mae(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> f64 {
    (truth - pred).row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64).sum()
}

/// Linear readout of an auxiliary observable from `[Φ; u]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservableMap {
    /// `r × (n_φ + p)`.
    pub weights: DMatrix<f64>,
    pub n_phi: usize,
}

impl ObservableMap {
    pub fn eval(&self, phi: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.weights * augmented(phi, u)
    }
}

fn augmented(phi: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(phi.nrows() + u.nrows(), phi.ncols());
    a.rows_mut(0, phi.nrows()).copy_from(phi);
    a.rows_mut(phi.nrows(), u.nrows()).copy_from(u);
    a
}

/// Ridge fit of observable samples `y` (`r × N`) onto `[Φ; u]`.
pub fn fit_observable(phi: &DMatrix<f64>, u: &DMatrix<f64>, y: &DMatrix<f64>, ridge_weight: f64) -> Result<ObservableMap> {
    if phi.ncols() != u.ncols() || phi.ncols() != y.ncols() {
        return Err(Error::Dimension("Φ, u and observable series differ in length".into()));
    }
    let weights = linalg::ridge(&augmented(phi, u), y, ridge_weight)?;
    Ok(ObservableMap { weights, n_phi: phi.nrows() })
}
