//! Regularized least squares.
//!
//! Everything here works in the "row-feature" layout used throughout the
//! crate: a design matrix `A` is `k × N` (one row per regressor, one column per
//! sample) and targets `Y` are `r × N`. The ridge estimate is
//! `W = ((A Aᵀ + λI)⁻¹ A Yᵀ)ᵀ`, an `r × k` matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};

use crate::error::{Error, Result};

/// Relative singular-value floor below which a Gram matrix counts as singular.
///
/// Rounding in `A Aᵀ` leaves rank-deficient Gram matrices with σ_min of
/// order `ε σ_max`, so the floor sits a few decades above machine epsilon.
pub const SINGULAR_RTOL: f64 = 1e-13;

/// Factorization of a regularized Gram matrix `A Aᵀ + λI`.
#[derive(Debug, Clone)]
pub enum GramFactor {
    Cholesky(Cholesky<f64, Dyn>),
    /// Rank-revealing fallback when the Cholesky factorization breaks down.
    Svd(SVD<f64, Dyn, Dyn>),
}

impl GramFactor {
    /// Factors `gram` (assumed symmetric).
    pub fn new(gram: DMatrix<f64>) -> Result<Self> {
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning("gram matrix has non-finite entries".into()));
        }
        if let Some(ch) = Cholesky::new(gram.clone()) {
            let diag = ch.l_dirty().diagonal();
            let (lo, hi) = diag
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d.abs()), hi.max(d.abs())));
            // squared pivot ratio approximates the condition number
            if hi > 0.0 && (lo / hi).powi(2) > SINGULAR_RTOL {
                return Ok(GramFactor::Cholesky(ch));
            }
        }
        let svd = SVD::new(gram, true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smax > 0.0) || smin <= smax * SINGULAR_RTOL {
            return Err(Error::Conditioning(format!(
                "regularized gram matrix is singular (σ_min = {smin:.3e}, σ_max = {smax:.3e})"
            )));
        }
        Ok(GramFactor::Svd(svd))
    }

    /// Solves `G X = rhs` for `X`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            GramFactor::Cholesky(ch) => ch.solve(rhs),
            GramFactor::Svd(svd) => svd
                .solve(rhs, 0.0)
                .expect("SVD computed with both singular vector sets"),
        }
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            GramFactor::Cholesky(ch) => ch.solve(rhs),
            GramFactor::Svd(svd) => svd
                .solve(rhs, 0.0)
                .expect("SVD computed with both singular vector sets"),
        }
    }
}

/// Factors `A Aᵀ + λI` for a row-feature design matrix `a`.
pub fn factor_gram(a: &DMatrix<f64>, lambda: f64) -> Result<GramFactor> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("ridge weight must be nonnegative, got {lambda}")));
    }
    let mut gram = a * a.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    GramFactor::new(gram)
}

/// Ridge estimate `((A Aᵀ + λI)⁻¹ A Yᵀ)ᵀ` with `a: k × N`, `y: r × N`.
pub fn ridge(a: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if a.ncols() != y.ncols() {
        return Err(Error::Dimension(format!(
            "design has {} samples but targets have {}",
            a.ncols(),
            y.ncols()
        )));
    }
    let factor = factor_gram(a, lambda)?;
    Ok(factor.solve(&(a * y.transpose())).transpose())
}

/// Ridge fit with an unpenalized intercept.
///
/// Features and targets are centered before the penalized solve, so a
/// constant target is reproduced exactly by the intercept alone.
pub fn ridge_with_intercept(
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = a.ncols();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let a_mean = a.column_mean();
    let y_mean = y.column_mean();
    let mut ac = a.clone();
    for mut col in ac.column_iter_mut() {
        col -= &a_mean;
    }
    let mut yc = y.clone();
    for mut col in yc.column_iter_mut() {
        col -= &y_mean;
    }
    let w = ridge(&ac, &yc, lambda)?;
    let b = &y_mean - &w * &a_mean;
    Ok((w, b))
}

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Sample covariance of the columns of `x` (`d × n`), normalized by `n − 1`.
pub fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols();
    let mean = x.column_mean();
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        col -= &mean;
    }
    symmetrize(&(&xc * xc.transpose() / (n.max(2) - 1) as f64))
}

/// Projects a symmetric matrix onto the PSD cone by flooring eigenvalues at 0.
pub fn psd_floor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}
