//! Temporal projection onto the span of a candidate Koopman spectrum.
//!
//! For a candidate eigenvalue set the pipeline is
//!
//! 1. fundamental basis `E` (the flow `e^{Λt}` applied to an all-ones
//!    initial condition),
//! 2. reference Koopman modes `C_ref` by ridge regression of the reference
//!    trajectory onto `E`,
//! 3. changed basis `B` whose rows are the modes multiplied into the
//!    exponential trajectories,
//! 4. eigenfunction initial values `Φ₀` of every trajectory by ridge
//!    projection onto `B`.
//!
//! Complex pairs `α ± iβ` occupy 2×2 blocks `[α −β; β α]`; purely real
//! eigenvalues occupy a single row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, GramFactor};
use crate::systems::{flatten_state_major, TrajectoryEnsemble};

/// Default threshold below which imaginary parts are zeroed.
pub const DEFAULT_IMAG_FLOOR: f64 = 0.01;

/// One eigenvalue, or the upper member `α + iβ` of a conjugate pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn new(re: f64, im: f64) -> Self {
        Eigenvalue { re, im: im.abs() }
    }

    pub fn real(re: f64) -> Self {
        Eigenvalue { re, im: 0.0 }
    }

    pub fn is_real(&self) -> bool {
        self.im == 0.0
    }

    pub fn block_size(&self) -> usize {
        if self.is_real() {
            1
        } else {
            2
        }
    }

    pub fn distance(&self, other: &Eigenvalue) -> f64 {
        ((self.re - other.re).powi(2) + (self.im - other.im).powi(2)).sqrt()
    }
}

/// Ordered eigenvalue blocks with per-block fixed flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueSet {
    pub pairs: Vec<Eigenvalue>,
    pub fixed: Vec<bool>,
    pub imag_floor: f64,
}

impl EigenvalueSet {
    pub fn new(pairs: Vec<Eigenvalue>) -> Self {
        let fixed = vec![false; pairs.len()];
        EigenvalueSet { pairs, fixed, imag_floor: DEFAULT_IMAG_FLOOR }
    }

    pub fn with_fixed(pairs: Vec<Eigenvalue>, fixed: Vec<bool>) -> Self {
        assert_eq!(pairs.len(), fixed.len());
        EigenvalueSet { pairs, fixed, imag_floor: DEFAULT_IMAG_FLOOR }
    }

    /// Builds a set from `(re, im)` tuples, all free.
    pub fn from_tuples(v: &[(f64, f64)]) -> Self {
        Self::new(v.iter().map(|&(re, im)| Eigenvalue::new(re, im)).collect())
    }

    /// Copy with every `0 < im < imag_floor` replaced by a real eigenvalue.
    pub fn floored(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.pairs {
            p.im = p.im.abs();
            if p.im < self.imag_floor {
                p.im = 0.0;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of eigenfunctions, `Σ` block sizes.
    pub fn n_phi(&self) -> usize {
        self.pairs.iter().map(Eigenvalue::block_size).sum()
    }

    /// Row offset of every block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.pairs
            .iter()
            .map(|p| {
                let o = off;
                off += p.block_size();
                o
            })
            .collect()
    }

    /// Block-diagonal `Λ`.
    pub fn lambda_matrix(&self) -> DMatrix<f64> {
        let n = self.n_phi();
        let mut l = DMatrix::zeros(n, n);
        for (p, o) in self.pairs.iter().zip(self.offsets()) {
            l[(o, o)] = p.re;
            if !p.is_real() {
                l[(o, o + 1)] = -p.im;
                l[(o + 1, o)] = p.im;
                l[(o + 1, o + 1)] = p.re;
            }
        }
        l
    }

    /// `ΛΦ` for each column of `phi` (`n_φ × k`), assembled block-wise.
    pub fn apply_lambda(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(phi.nrows(), phi.ncols());
        for (p, o) in self.pairs.iter().zip(self.offsets()) {
            if p.is_real() {
                out.row_mut(o).copy_from(&(phi.row(o) * p.re));
            } else {
                let a = phi.row(o);
                let b = phi.row(o + 1);
                out.row_mut(o).copy_from(&(a * p.re - b * p.im));
                out.row_mut(o + 1).copy_from(&(a * p.im + b * p.re));
            }
        }
        out
    }

    /// Transition matrix `e^{Λt}`.
    pub fn flow(&self, t: f64) -> DMatrix<f64> {
        let n = self.n_phi();
        let mut m = DMatrix::zeros(n, n);
        for (p, o) in self.pairs.iter().zip(self.offsets()) {
            let e = (p.re * t).exp();
            if p.is_real() {
                m[(o, o)] = e;
            } else {
                let (s, c) = (p.im * t).sin_cos();
                m[(o, o)] = e * c;
                m[(o, o + 1)] = -e * s;
                m[(o + 1, o)] = e * s;
                m[(o + 1, o + 1)] = e * c;
            }
        }
        m
    }

    /// Permutes the blocks; `order[k]` is the old index of new block `k`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        EigenvalueSet {
            pairs: order.iter().map(|&i| self.pairs[i]).collect(),
            fixed: order.iter().map(|&i| self.fixed[i]).collect(),
            imag_floor: self.imag_floor,
        }
    }

    /// Row permutation induced on `Φ` by a block permutation.
    pub fn row_permutation(&self, order: &[usize]) -> Vec<usize> {
        let off = self.offsets();
        order
            .iter()
            .flat_map(|&i| (0..self.pairs[i].block_size()).map(move |k| (i, k)))
            .map(|(i, k)| off[i] + k)
            .collect()
    }

    /// Index of the first zero eigenvalue block, if any.
    pub fn conservative_index(&self) -> Option<usize> {
        self.pairs.iter().position(|p| p.re == 0.0 && p.im == 0.0)
    }
}

/// Fundamental temporal basis `E` (`n_φ × N`).
///
/// A pair contributes `e^{αt}(cos βt − sin βt)` and `e^{αt}(sin βt + cos βt)`;
/// a real eigenvalue contributes `e^{αt}`.
pub fn build_fundamental_basis(eigs: &EigenvalueSet, time_axis: &[f64]) -> DMatrix<f64> {
    let n = eigs.n_phi();
    let mut e = DMatrix::zeros(n, time_axis.len());
    for (p, o) in eigs.pairs.iter().zip(eigs.offsets()) {
        for (k, &t) in time_axis.iter().enumerate() {
            let g = (p.re * t).exp();
            if p.is_real() {
                e[(o, k)] = g;
            } else {
                let (s, c) = (p.im * t).sin_cos();
                e[(o, k)] = g * (c - s);
                e[(o + 1, k)] = g * (s + c);
            }
        }
    }
    e
}

/// Reference Koopman modes fitted on the reference trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeMatrix {
    /// `m × n_φ`.
    pub c_ref: DMatrix<f64>,
    pub ridge_weight: f64,
    /// `‖x_ref − C_ref E‖_F`.
    pub residual: f64,
}

/// `C_ref = ((EEᵀ + λI)⁻¹ E x_refᵀ)ᵀ`.
pub fn fit_reference_modes(x_ref: &DMatrix<f64>, e: &DMatrix<f64>, ridge_weight: f64) -> Result<ModeMatrix> {
    if x_ref.ncols() != e.ncols() {
        return Err(Error::Dimension(format!(
            "reference has {} samples, basis has {}",
            x_ref.ncols(),
            e.ncols()
        )));
    }
    let c_ref = linalg::ridge(e, x_ref, ridge_weight)?;
    let residual = (x_ref - &c_ref * e).norm();
    Ok(ModeMatrix { c_ref, ridge_weight, residual })
}

/// Changed temporal basis `B` (`n_φ × mN`), flattened state-major.
pub fn build_projection_basis(c_ref: &DMatrix<f64>, eigs: &EigenvalueSet, time_axis: &[f64]) -> Result<DMatrix<f64>> {
    let n = eigs.n_phi();
    if c_ref.ncols() != n {
        return Err(Error::Dimension(format!("C_ref has {} columns, spectrum has {n} eigenfunctions", c_ref.ncols())));
    }
    let m = c_ref.nrows();
    let nt = time_axis.len();
    let mut b = DMatrix::zeros(n, m * nt);
    for (p, o) in eigs.pairs.iter().zip(eigs.offsets()) {
        for (k, &t) in time_axis.iter().enumerate() {
            let g = (p.re * t).exp();
            if p.is_real() {
                for s in 0..m {
                    b[(o, s * nt + k)] = c_ref[(s, o)] * g;
                }
            } else {
                let (sn, cs) = (p.im * t).sin_cos();
                for s in 0..m {
                    let c1 = c_ref[(s, o)];
                    let c2 = c_ref[(s, o + 1)];
                    b[(o, s * nt + k)] = g * (c1 * cs + c2 * sn);
                    b[(o + 1, s * nt + k)] = g * (-c1 * sn + c2 * cs);
                }
            }
        }
    }
    Ok(b)
}

/// Ridge projector onto the rows of `B`, factored once and shared.
#[derive(Debug, Clone)]
pub struct Projector {
    pub basis: DMatrix<f64>,
    pub ridge_weight: f64,
    factor: GramFactor,
}

impl Projector {
    pub fn new(basis: DMatrix<f64>, ridge_weight: f64) -> Result<Self> {
        let factor = linalg::factor_gram(&basis, ridge_weight)?;
        Ok(Projector { basis, ridge_weight, factor })
    }

    /// `Φ₀ = ((BBᵀ + λI)⁻¹ B x_rᵀ)ᵀ` for one trajectory.
    pub fn project(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let xr = flatten_state_major(x);
        if xr.len() != self.basis.ncols() {
            return Err(Error::Dimension(format!(
                "trajectory flattens to {} entries, basis expects {}",
                xr.len(),
                self.basis.ncols()
            )));
        }
        Ok(self.factor.solve_vec(&(&self.basis * xr)))
    }

    /// Projects every trajectory; column `i` of the result is `Φ₀ⁱ`.
    pub fn project_all(&self, states: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
        let len = self.basis.ncols();
        let mut x = DMatrix::zeros(len, states.len());
        for (i, s) in states.iter().enumerate() {
            if s.len() != len {
                return Err(Error::Dimension(format!("trajectory {i} has {} entries, basis expects {len}", s.len())));
            }
            // state-major flattening of an m × N block
            let mut col = x.column_mut(i);
            let n = s.ncols();
            for r in 0..s.nrows() {
                for k in 0..n {
                    col[r * n + k] = s[(r, k)];
                }
            }
        }
        Ok(self.factor.solve(&(&self.basis * x)))
    }
}

/// Single-trajectory projection without a shared factorization.
pub fn project_trajectory(x: &DMatrix<f64>, b: &DMatrix<f64>, ridge_weight: f64) -> Result<DVector<f64>> {
    Projector::new(b.clone(), ridge_weight)?.project(x)
}

/// `C_ref e^{Λt} Φ₀` evaluated on `time_axis` (`m × N`).
pub fn reconstruct(c_ref: &DMatrix<f64>, eigs: &EigenvalueSet, phi0: &DVector<f64>, time_axis: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(c_ref.nrows(), time_axis.len());
    for (k, &t) in time_axis.iter().enumerate() {
        out.column_mut(k).copy_from(&(c_ref * (eigs.flow(t) * phi0)));
    }
    out
}

/// Mean squared reconstruction error over the selected trajectories.
///
/// Averaged over every state entry, sample and trajectory, so the value is
/// nonnegative and comparable across grid sizes.
pub fn temporal_cost(
    ens: &TrajectoryEnsemble,
    subgrid: &[usize],
    c_ref: &DMatrix<f64>,
    eigs: &EigenvalueSet,
    phi0: &DMatrix<f64>,
) -> Result<f64> {
    if subgrid.is_empty() {
        return Err(Error::Config("empty temporal-cost subgrid".into()));
    }
    let t = ens.time_axis();
    let b = build_projection_basis(c_ref, eigs, &t)?;
    temporal_cost_with_basis(ens, subgrid, &b, phi0)
}

/// [`temporal_cost`] with a precomputed `B`; `Φ₀ᵀB` is the flattened
/// reconstruction `C_ref e^{Λt}Φ₀`.
pub fn temporal_cost_with_basis(
    ens: &TrajectoryEnsemble,
    subgrid: &[usize],
    b: &DMatrix<f64>,
    phi0: &DMatrix<f64>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in subgrid {
        if i >= phi0.ncols() || i >= ens.len() {
            return Err(Error::Dimension(format!("subgrid index {i} has no Φ₀ column")));
        }
        let recon = b.tr_mul(&phi0.column(i));
        let x = &ens.states[i];
        let n = x.ncols();
        for r in 0..x.nrows() {
            for k in 0..n {
                sum += (x[(r, k)] - recon[r * n + k]).powi(2);
            }
        }
        count += x.len();
    }
    Ok(sum / count as f64)
}

/// Everything produced by the temporal stage for one candidate spectrum.
#[derive(Debug, Clone)]
pub struct SpectralFit {
    /// Spectrum after the imaginary floor.
    pub eigs: EigenvalueSet,
    pub modes: ModeMatrix,
    pub projector: Projector,
    /// `n_φ × n_t`.
    pub phi0: DMatrix<f64>,
}

impl SpectralFit {
    /// Runs floor → `E` → `C_ref` → `B` → `Φ₀` for every trajectory.
    pub fn compute(eigs: &EigenvalueSet, ens: &TrajectoryEnsemble, ridge_weight: f64) -> Result<Self> {
        let eigs = eigs.floored();
        let t = ens.time_axis();
        let e = build_fundamental_basis(&eigs, &t);
        let modes = fit_reference_modes(ens.reference(), &e, ridge_weight)?;
        let b = build_projection_basis(&modes.c_ref, &eigs, &t)?;
        let projector = Projector::new(b, ridge_weight)?;
        let phi0 = projector.project_all(&ens.states)?;
        if phi0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning("non-finite eigenfunction initial values".into()));
        }
        Ok(SpectralFit { eigs, modes, projector, phi0 })
    }

    pub fn temporal_cost(&self, ens: &TrajectoryEnsemble, subgrid: &[usize]) -> Result<f64> {
        temporal_cost_with_basis(ens, subgrid, &self.projector.basis, &self.phi0)
    }
}

/// Fundamental angular frequency of an oscillation seen in the data.
///
/// Every trajectory contributes the intervals between successive upward
/// crossings of the mean of state `component` over its second half (so
/// transients toward a limit cycle are largely excluded from the level);
/// the median interval is the period. Returns `None` when no trajectory
/// completes a full period.
pub fn estimate_fundamental_frequency(ens: &TrajectoryEnsemble, component: usize) -> Option<f64> {
    let mut periods = vec![];
    for s in &ens.states {
        let row: Vec<f64> = s.row(component).iter().copied().collect();
        let n = row.len();
        let level = row[n / 2..].iter().sum::<f64>() / (n - n / 2) as f64;
        let mut last: Option<f64> = None;
        for k in 1..n {
            let (a, b) = (row[k - 1] - level, row[k] - level);
            if a < 0.0 && b >= 0.0 {
                let t = ens.dt * ((k - 1) as f64 + a / (a - b));
                if let Some(prev) = last {
                    periods.push(t - prev);
                }
                last = Some(t);
            }
        }
    }
    if periods.is_empty() {
        return None;
    }
    periods.sort_by(|a, b| a.total_cmp(b));
    let mid = periods.len() / 2;
    let median = if periods.len() % 2 == 0 { 0.5 * (periods[mid - 1] + periods[mid]) } else { periods[mid] };
    Some(2.0 * std::f64::consts::PI / median)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{simulate_ensemble, DynSystem, SimGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_pair_rows_are_ones() {
        let eigs = EigenvalueSet::from_tuples(&[(0.0, 0.5)]);
        let mut z = eigs.clone();
        z.pairs[0] = Eigenvalue { re: 0.0, im: 0.0 };
        let e = build_fundamental_basis(&z, &[0.0, 1.0, 7.3]);
        assert!(e.iter().all(|&v| v == 1.0));
        assert_eq!(e.nrows(), 1);
    }

    #[test]
    fn real_block_value() {
        let eigs = EigenvalueSet::from_tuples(&[(-0.1, 0.0)]);
        let e = build_fundamental_basis(&eigs, &[10.0]);
        assert!((e[(0, 0)] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn pair_value_matches_direct_formula() {
        let eigs = EigenvalueSet::from_tuples(&[(-0.3, 0.436)]);
        let e = build_fundamental_basis(&eigs, &[1.0]);
        let expected = (-0.3f64).exp() * (0.436f64.cos() - 0.436f64.sin());
        assert!((e[(0, 0)] - expected).abs() < 1e-15);
        assert!((e[(0, 0)] - 0.3586).abs() < 5e-4);
    }

    #[test]
    fn floor_zeroes_small_imaginary_parts() {
        let eigs = EigenvalueSet::from_tuples(&[(-0.2, 0.005), (-0.3, 0.02), (-1.0, 0.0)]);
        let f = eigs.floored();
        assert_eq!(f.pairs[0].im, 0.0);
        assert_eq!(f.pairs[1].im, 0.02);
        assert_eq!(f.n_phi(), 4);
        assert!(f.pairs.iter().all(|p| p.im == 0.0 || p.im >= f.imag_floor));
    }

    #[test]
    fn lambda_layout() {
        let eigs = EigenvalueSet::from_tuples(&[(-0.5, 0.0), (-0.3, 2.0)]);
        let l = eigs.lambda_matrix();
        assert_eq!(l[(0, 0)], -0.5);
        assert_eq!(l[(1, 1)], -0.3);
        assert_eq!(l[(1, 2)], -2.0);
        assert_eq!(l[(2, 1)], 2.0);
        let phi = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert!((eigs.apply_lambda(&phi) - &l * &phi).amax() < 1e-15);
        // flow is the exponential of Λ
        let h = 1e-6;
        let d = (eigs.flow(h) - eigs.flow(-h)) / (2.0 * h);
        assert!((d - l).amax() < 1e-8);
    }

    #[test]
    fn exact_modes_recovered() {
        let eigs = EigenvalueSet::from_tuples(&[(-0.2, 0.0), (-0.3, 1.1)]);
        let t: Vec<f64> = (0..80).map(|k| k as f64 * 0.1).collect();
        let e = build_fundamental_basis(&eigs, &t);
        let c = DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 2.0, 0.3, 0.7, -1.2]);
        let fit = fit_reference_modes(&(&c * &e), &e, 0.0).unwrap();
        assert!((fit.c_ref - c).amax() < 1e-10);
        assert!(fit.residual < 1e-10);
    }

    #[test]
    fn modes_match_normal_equation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(2, 50, |_, _| rng.gen_range(-1.0..1.0));
        let e = DMatrix::from_fn(4, 50, |_, _| rng.gen_range(-1.0..1.0));
        let lam = 1e-3;
        let fit = fit_reference_modes(&x, &e, lam).unwrap();
        let gram = &e * e.transpose() + DMatrix::identity(4, 4) * lam;
        let oracle = (gram.lu().solve(&(&e * x.transpose())).unwrap()).transpose();
        assert!((&fit.c_ref - &oracle).amax() / oracle.amax() < 1e-8);
    }

    #[test]
    fn identity_modes_reduce_b_to_e() {
        let eigs = EigenvalueSet::from_tuples(&[(-0.4, 0.9)]);
        let t: Vec<f64> = (0..10).map(|k| k as f64 * 0.3).collect();
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = build_projection_basis(&c, &eigs, &t).unwrap();
        // with c₁ = 1, c₂ = 0 the rows are e^{αt}cos βt and −e^{αt}sin βt
        for (k, &tk) in t.iter().enumerate() {
            let g = (-0.4 * tk).exp();
            assert!((b[(0, k)] - g * (0.9 * tk).cos()).abs() < 1e-15);
            assert!((b[(1, k)] + g * (0.9 * tk).sin()).abs() < 1e-15);
        }
        // and Φ₀ = (1, 1) reproduces c · E
        let e = build_fundamental_basis(&eigs, &t);
        let sum = b.row(0) + b.row(1);
        assert!((sum - e.row(0)).amax() < 1e-14);
    }

    #[test]
    fn b_at_time_zero_is_state_major_identity() {
        let eigs = EigenvalueSet::from_tuples(&[(-0.3, 0.436)]);
        let c = DMatrix::identity(2, 2);
        let b = build_projection_basis(&c, &eigs, &[0.0]).unwrap();
        assert_eq!(b.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn synthetic_phi0_recovered_exactly() {
        let eigs = EigenvalueSet::from_tuples(&[(-0.2, 0.0), (-0.5, 0.0), (-0.3, 1.5)]);
        let t: Vec<f64> = (0..60).map(|k| k as f64 * 0.1).collect();
        let c = DMatrix::from_row_slice(2, 4, &[1.0, 0.2, 0.5, -0.3, -0.4, 1.0, 0.1, 0.8]);
        let b = build_projection_basis(&c, &eigs, &t).unwrap();
        let phi = DVector::from_column_slice(&[2.0, 0.5, -1.0, 3.0]);
        let xr = b.tr_mul(&phi);
        let x = DMatrix::from_fn(2, 60, |r, k| xr[r * 60 + k]);
        let got = project_trajectory(&x, &b, 0.0).unwrap();
        assert!((got - &phi).amax() < 1e-10);
        // and the two reconstruction routes agree
        let recon = reconstruct(&c, &eigs, &phi, &t);
        assert!((recon - x).amax() < 1e-12);
    }

    #[test]
    fn exact_linear_system_has_zero_temporal_cost() {
        // ẋ = Ax with diagonalizable A; the spectrum of A reproduces every trajectory
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.3, -1.2]);
        let sys = DynSystem::linear(a, DMatrix::zeros(2, 0));
        let grid = SimGrid::square(-1.0, 1.0, 5).unwrap();
        let ens = simulate_ensemble(&sys, &grid, 0.1, 40, &[-1.0, -1.0], None).unwrap();
        // discrete Heun map eigenvalues, expressed as continuous rates
        let rate = |l: f64| ((1.0 + l * 0.1 + (l * 0.1).powi(2) / 2.0) as f64).ln() / 0.1;
        let eigs = EigenvalueSet::from_tuples(&[(rate(-0.5), 0.0), (rate(-1.2), 0.0)]);
        let fit = SpectralFit::compute(&eigs, &ens, 0.0).unwrap();
        let sub: Vec<usize> = (0..ens.len()).collect();
        let j = fit.temporal_cost(&ens, &sub).unwrap();
        assert!(j < 1e-20, "J_temp = {j}");
        let j2 = temporal_cost(&ens, &sub, &fit.modes.c_ref, &fit.eigs, &fit.phi0).unwrap();
        assert!((j - j2).abs() < 1e-25);
    }

    #[test]
    fn reference_projects_to_ones() {
        let sys = DynSystem::closure_default();
        let grid = SimGrid::square(-1.0, 1.0, 5).unwrap();
        let ens = simulate_ensemble(&sys, &grid, 0.2, 250, &[-1.0, -1.0], None).unwrap();
        let eigs = EigenvalueSet::from_tuples(&[(-0.1, 0.0), (-0.2, 0.0), (-1.0, 0.0)]);
        let fit = SpectralFit::compute(&eigs, &ens, 1e-6).unwrap();
        let r = fit.phi0.column(ens.reference_index);
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-3), "{r}");
    }

    #[test]
    fn pair_order_permutes_consistently() {
        let sys = DynSystem::closure_default();
        let grid = SimGrid::square(-1.0, 1.0, 5).unwrap().with_subgrid(crate::systems::SubgridRule::ODD);
        let ens = simulate_ensemble(&sys, &grid, 0.2, 100, &[-1.0, -1.0], None).unwrap();
        let eigs = EigenvalueSet::from_tuples(&[(-0.1, 0.0), (-0.25, 0.3), (-1.0, 0.0)]);
        let order = [2, 0, 1];
        let perm = eigs.permuted(&order);
        let a = SpectralFit::compute(&eigs, &ens, 1e-6).unwrap();
        let b = SpectralFit::compute(&perm, &ens, 1e-6).unwrap();
        let rows = eigs.row_permutation(&order);
        for (new, &old) in rows.iter().enumerate() {
            assert!((a.phi0.row(old) - b.phi0.row(new)).amax() < 1e-8);
            assert!((a.modes.c_ref.column(old) - b.modes.c_ref.column(new)).amax() < 1e-8);
        }
        let sub = crate::systems::select_subgrid(&grid).unwrap();
        let ja = a.temporal_cost(&ens, &sub).unwrap();
        let jb = b.temporal_cost(&ens, &sub).unwrap();
        assert!((ja - jb).abs() <= 1e-9 * ja.max(1e-300));
    }

    #[test]
    fn fundamental_frequency_of_a_harmonic_ensemble() {
        // harmonic oscillator ẋ₁ = x₂, ẋ₂ = −ω²x₁ as a linear system
        let w = 0.824;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -w * w, 0.0]);
        let sys = DynSystem::linear(a, DMatrix::zeros(2, 0));
        let grid = SimGrid::square(0.5, 1.0, 3).unwrap();
        let ens = simulate_ensemble(&sys, &grid, 0.01, 3000, &[0.5, 0.5], None).unwrap();
        let est = estimate_fundamental_frequency(&ens, 0).unwrap();
        assert!((est - w).abs() < 1e-3, "{est}");
        let short = simulate_ensemble(&sys, &grid, 0.01, 100, &[0.5, 0.5], None).unwrap();
        assert!(estimate_fundamental_frequency(&short, 0).is_none());
    }
}
