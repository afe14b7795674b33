//! Cubic smoothing splines on regular grids.
//!
//! A spline fit is linear in the sample values, so every 1-D fit from a
//! source axis to a target axis is represented by a dense evaluation matrix.
//! Gridded 2-D data is then handled as a tensor product `S₁ V S₂ᵀ`, which is
//! what makes repeated interpolation inside the optimizer cheap.
//!
//! With `p = 1` the spline interpolates with not-a-knot end conditions (so
//! cubics, and in particular quadratics, are reproduced exactly). With
//! `0 < p < 1` it is the natural smoothing spline minimizing
//! `p Σ (yᵢ − f(xᵢ))² + (1 − p) ∫ f''²`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Values and second derivatives at the knots of a cubic spline.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl CubicSpline {
    /// Fits a spline through `(x, y)`; `x` must be strictly increasing.
    pub fn fit(x: &[f64], y: &[f64], p: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension(format!("{} knots but {} values", x.len(), y.len())));
        }
        if x.len() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: x.len() });
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("smoothing parameter must lie in (0, 1], got {p}")));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("spline knots must be strictly increasing".into()));
        }
        let (values, second) = if p >= 1.0 {
            (y.to_vec(), not_a_knot_second_derivatives(x, y))
        } else {
            natural_smoothing(x, y, (1.0 - p) / p)
        };
        Ok(CubicSpline { knots: x.to_vec(), values, second })
    }

    pub fn eval(&self, xq: f64) -> f64 {
        let n = self.knots.len();
        let j = match self.knots.partition_point(|&k| k <= xq) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        };
        let (x0, x1) = (self.knots[j], self.knots[j + 1]);
        let h = x1 - x0;
        let a = (x1 - xq) / h;
        let b = (xq - x0) / h;
        a * self.values[j]
            + b * self.values[j + 1]
            + ((a * a * a - a) * self.second[j] + (b * b * b - b) * self.second[j + 1]) * h * h / 6.0
    }
}

fn not_a_knot_second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 2 {
        return vec![0.0; 2];
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    if n == 3 {
        // single parabola through three points
        let d0 = (y[1] - y[0]) / h[0];
        let d1 = (y[2] - y[1]) / h[1];
        let c = 2.0 * (d1 - d0) / (h[0] + h[1]);
        return vec![c; 3];
    }
    let mut a = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    // third-derivative continuity at the first and last interior knots
    a[(0, 0)] = -1.0 / h[0];
    a[(0, 1)] = 1.0 / h[0] + 1.0 / h[1];
    a[(0, 2)] = -1.0 / h[1];
    a[(n - 1, n - 3)] = -1.0 / h[n - 3];
    a[(n - 1, n - 2)] = 1.0 / h[n - 3] + 1.0 / h[n - 2];
    a[(n - 1, n - 1)] = -1.0 / h[n - 2];
    for i in 1..n - 1 {
        a[(i, i - 1)] = h[i - 1];
        a[(i, i)] = 2.0 * (h[i - 1] + h[i]);
        a[(i, i + 1)] = h[i];
        rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
    }
    a.lu().solve(&rhs).expect("not-a-knot system is nonsingular").iter().copied().collect()
}

fn natural_smoothing(x: &[f64], y: &[f64], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    if n == 2 {
        return (y.to_vec(), vec![0.0; 2]);
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let k = n - 2;
    let mut r = DMatrix::zeros(k, k);
    let mut q = DMatrix::zeros(n, k);
    for c in 0..k {
        let i = c + 1;
        r[(c, c)] = (h[i - 1] + h[i]) / 3.0;
        if c + 1 < k {
            r[(c, c + 1)] = h[i] / 6.0;
            r[(c + 1, c)] = h[i] / 6.0;
        }
        q[(i - 1, c)] = 1.0 / h[i - 1];
        q[(i, c)] = -1.0 / h[i - 1] - 1.0 / h[i];
        q[(i + 1, c)] = 1.0 / h[i];
    }
    let yv = DVector::from_column_slice(y);
    let lhs = &r + q.transpose() * &q * alpha;
    let gamma = lhs
        .cholesky()
        .expect("smoothing system is positive definite")
        .solve(&(q.transpose() * &yv));
    let g = &yv - &q * &gamma * alpha;
    let mut second = vec![0.0; n];
    second[1..n - 1].copy_from_slice(gamma.as_slice());
    (g.iter().copied().collect(), second)
}

/// Matrix `S` (`target × source`) such that `S y` evaluates the spline of `y`.
pub fn evaluation_matrix(source: &[f64], target: &[f64], p: f64) -> Result<DMatrix<f64>> {
    let n = source.len();
    let mut s = DMatrix::zeros(target.len(), n);
    let mut unit = vec![0.0; n];
    for j in 0..n {
        unit[j] = 1.0;
        let sp = CubicSpline::fit(source, &unit, p)?;
        for (i, &t) in target.iter().enumerate() {
            s[(i, j)] = sp.eval(t);
        }
        unit[j] = 0.0;
    }
    Ok(s)
}

/// Tensor-product spline from one 2-D grid onto another.
#[derive(Debug, Clone)]
pub struct TensorSpline2 {
    s1: DMatrix<f64>,
    s2: DMatrix<f64>,
}

impl TensorSpline2 {
    pub fn new(src: (&[f64], &[f64]), dst: (&[f64], &[f64]), p: f64) -> Result<Self> {
        Ok(TensorSpline2 {
            s1: evaluation_matrix(src.0, dst.0, p)?,
            s2: evaluation_matrix(src.1, dst.1, p)?,
        })
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.s1.ncols(), self.s2.ncols())
    }

    pub fn target_shape(&self) -> (usize, usize) {
        (self.s1.nrows(), self.s2.nrows())
    }

    /// Evaluates the surface through `v` (`n₁ × n₂`) on the target grid.
    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        &self.s1 * v * self.s2.transpose()
    }
}
