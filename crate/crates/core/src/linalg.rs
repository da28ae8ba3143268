//! Dense linear algebra used by the filters.
//!
//! Sizes are small (state dimension up to a few hundred, observation
//! dimension at most the state dimension), so everything is dense and
//! backed by `nalgebra`. The symmetric eigendecomposition is the only
//! factorization; square roots, solves and inverse square roots all go
//! through it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

pub type StateVector = DVector<f64>;

/// Relative threshold below which negative eigenvalues count as round-off.
pub const PSD_CLAMP: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-12;
const EIG_MAX_ITER: usize = 10_000;

/// A square symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, rejecting it unless `|m_ij - m_ji| <= 1e-12 max(1, |m_ij|)`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                context: "SymMatrix::new (square)",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let n = m.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = (m[(i, j)] - m[(j, i)]).abs();
                let scale = m[(i, j)].abs().max(1.0);
                worst = worst.max(gap / scale);
            }
        }
        if worst > SYMMETRY_TOL {
            return Err(Error::NotSymmetric { asymmetry: worst });
        }
        Ok(Self(m))
    }

    /// Builds `(m + mᵀ)/2`.
    pub fn symmetrize(m: &DMatrix<f64>) -> Self {
        Self((m + m.transpose()) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(&self.0 * factor)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    /// PSD test with the same round-off allowance as [`psd_sqrt`].
    pub fn is_psd(&self) -> bool {
        match sym_eig(self) {
            Ok(eig) => eig.values.iter().all(|&v| v >= -clamp_threshold(self, &eig.values)),
            Err(_) => false,
        }
    }
}

impl std::ops::Add for &SymMatrix {
    type Output = SymMatrix;

    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &rhs.0)
    }
}

/// A `k × d` observation operator with orthonormal rows (`H Hᵀ = I_k`).
///
/// Coordinate-selection operators keep their row indices so that `Hu`,
/// `Hᵀy` and `Pu` avoid dense products.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    dense: DMatrix<f64>,
    selection: Option<Vec<usize>>,
}

impl ObservationMatrix {
    /// Rows of the `d × d` identity at `indices`, in the given order.
    pub fn selection(state_dim: usize, indices: &[usize]) -> Result<Self> {
        let mut seen = vec![false; state_dim];
        for &i in indices {
            if i >= state_dim {
                return Err(Error::InvalidObservation(format!(
                    "row index {i} out of range for state dimension {state_dim}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidObservation(format!("row index {i} repeated")));
            }
        }
        let mut dense = DMatrix::zeros(indices.len(), state_dim);
        for (r, &i) in indices.iter().enumerate() {
            dense[(r, i)] = 1.0;
        }
        Ok(Self {
            dense,
            selection: Some(indices.to_vec()),
        })
    }

    pub fn identity(state_dim: usize) -> Self {
        let idx: Vec<usize> = (0..state_dim).collect();
        Self::selection(state_dim, &idx).expect("identity rows are valid")
    }

    /// General operator; rows must be orthonormal to 1e-12.
    pub fn from_rows(rows: DMatrix<f64>) -> Result<Self> {
        let gram = &rows * rows.transpose();
        let k = rows.nrows();
        let err = (&gram - DMatrix::<f64>::identity(k, k)).amax();
        if k > 0 && err > 1e-12 {
            return Err(Error::InvalidObservation(format!(
                "rows are not orthonormal: |HH* - I|max = {err:e}"
            )));
        }
        Ok(Self {
            dense: rows,
            selection: None,
        })
    }

    /// Number of observed components `k`.
    pub fn obs_dim(&self) -> usize {
        self.dense.nrows()
    }

    /// State dimension `d`.
    pub fn state_dim(&self) -> usize {
        self.dense.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.dense
    }

    pub fn selected_rows(&self) -> Option<&[usize]> {
        self.selection.as_deref()
    }

    /// `Hu`.
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.selection {
            Some(idx) => DVector::from_iterator(idx.len(), idx.iter().map(|&i| u[i])),
            None => &self.dense * u,
        }
    }

    /// `H X` for a `d × n` matrix.
    pub fn apply_cols(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.selection {
            Some(idx) => x.select_rows(idx.iter()),
            None => &self.dense * x,
        }
    }

    /// `H* y`.
    pub fn adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.selection {
            Some(idx) => {
                let mut out = DVector::zeros(self.state_dim());
                for (r, &i) in idx.iter().enumerate() {
                    out[i] = y[r];
                }
                out
            }
            None => self.dense.tr_mul(y),
        }
    }

    /// `Pu = H*Hu`.
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        self.adjoint(&self.apply(u))
    }

    /// `(I - P)u`.
    pub fn complement(&self, u: &DVector<f64>) -> DVector<f64> {
        u - self.project(u)
    }

    /// The `d × d` orthogonal projector `P = H*H`.
    pub fn projector(&self) -> DMatrix<f64> {
        self.dense.tr_mul(&self.dense)
    }
}

/// `V(u) = (|u|² + β|Pu|²)^{1/2}`.
pub fn v_norm(u: &DVector<f64>, beta: f64, h: &ObservationMatrix) -> Result<f64> {
    check_dim("v_norm", h.state_dim(), u.len())?;
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("V-norm weight must be >= 0, got {beta}")));
    }
    let observed = h.apply(u).norm_squared();
    Ok((u.norm_squared() + beta * observed).sqrt())
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    /// `V f(Λ) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[j]);
        }
        let out = scaled * self.vectors.transpose();
        (&out + out.transpose()) * 0.5
    }
}

pub fn sym_eig(s: &SymMatrix) -> Result<SymEigen> {
    let n = s.dim();
    if n == 0 {
        return Ok(SymEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::try_new(s.as_matrix().clone(), f64::EPSILON, EIG_MAX_ITER)
        .ok_or(Error::NoConvergence {
            iterations: EIG_MAX_ITER,
        })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = eig.eigenvectors.select_columns(order.iter());
    Ok(SymEigen { values, vectors })
}

fn clamp_threshold(s: &SymMatrix, values: &DVector<f64>) -> f64 {
    let spread = values.amax();
    PSD_CLAMP * s.trace().max(0.0) + 64.0 * f64::EPSILON * spread
}

/// Symmetric square root of a PSD matrix.
///
/// Eigenvalues in `[-1e-10 trace, 0)` are treated as round-off and clamped;
/// anything more negative is rejected.
pub fn psd_sqrt(s: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(s)?;
    let threshold = clamp_threshold(s, &eig.values);
    if let Some(&worst) = eig.values.iter().find(|&&v| v < -threshold) {
        return Err(Error::NotPsd {
            eigenvalue: worst,
            threshold: -threshold,
        });
    }
    Ok(SymMatrix(eig.reconstruct_with(|v| v.max(0.0).sqrt())))
}

/// Zeroes eigenvalues below zero and re-symmetrizes; fails on a material
/// negative eigenvalue.
pub fn clamp_psd(s: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(s)?;
    let threshold = clamp_threshold(s, &eig.values);
    if let Some(&worst) = eig.values.iter().find(|&&v| v < -threshold) {
        return Err(Error::NotPsd {
            eigenvalue: worst,
            threshold: -threshold,
        });
    }
    if eig.values.iter().all(|&v| v >= 0.0) {
        return Ok(SymMatrix::symmetrize(s.as_matrix()));
    }
    Ok(SymMatrix(eig.reconstruct_with(|v| v.max(0.0))))
}

fn check_spd(eig: &SymEigen, context: &str) -> Result<()> {
    let top = eig.values.amax();
    let bottom = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
    if eig.values.len() > 0 && !(bottom > 1e-14 * top.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular(format!(
            "{context}: smallest eigenvalue {bottom:e} vs largest {top:e}"
        )));
    }
    Ok(())
}

/// Solves `S X = B` for symmetric positive definite `S`.
pub fn sym_solve(s: &SymMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("sym_solve", s.dim(), b.nrows())?;
    let eig = sym_eig(s)?;
    check_spd(&eig, "sym_solve")?;
    let mut coeffs = eig.vectors.tr_mul(b);
    for (i, mut row) in coeffs.row_iter_mut().enumerate() {
        row /= eig.values[i];
    }
    Ok(&eig.vectors * coeffs)
}

/// `S^{-1/2}` for symmetric positive definite `S`.
pub fn spd_inv_sqrt(s: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(s)?;
    check_spd(&eig, "spd_inv_sqrt")?;
    Ok(SymMatrix(eig.reconstruct_with(|v| 1.0 / v.sqrt())))
}

/// `S^p` on the range of a PSD matrix `S` and zero on its (numerical)
/// null space; `p = -1` is the Moore–Penrose inverse.
pub fn psd_pinv_pow(s: &SymMatrix, power: f64) -> Result<SymMatrix> {
    let eig = sym_eig(s)?;
    let top = eig.values.amax();
    let cutoff = 1e-12 * top;
    Ok(SymMatrix(eig.reconstruct_with(|v| if top > 0.0 && v > cutoff { v.powf(power) } else { 0.0 })))
}

/// Innovation covariance `HΣH* + ε²R`.
pub fn innovation_cov(
    sigma: &SymMatrix,
    h: &ObservationMatrix,
    eps: f64,
    r: &SymMatrix,
) -> Result<SymMatrix> {
    check_dim("innovation_cov (Σ)", h.state_dim(), sigma.dim())?;
    check_dim("innovation_cov (R)", h.obs_dim(), r.dim())?;
    let h_sigma = h.apply_cols(sigma.as_matrix());
    let hsh = h.apply_cols(&h_sigma.transpose());
    Ok(SymMatrix::symmetrize(&(hsh + r.as_matrix() * (eps * eps))))
}

/// Kalman gain `ΣH*(HΣH* + ε²R)^{-1}` (a `d × k` matrix).
///
/// The `k × k` innovation system is solved directly; no inverse is formed.
pub fn kalman_gain(
    sigma: &SymMatrix,
    h: &ObservationMatrix,
    eps: f64,
    r: &SymMatrix,
) -> Result<DMatrix<f64>> {
    let innovation = innovation_cov(sigma, h, eps, r)?;
    // K = Σ H* S^{-1}  <=>  Kᵀ = S^{-1} H Σ
    let h_sigma = h.apply_cols(sigma.as_matrix());
    let gain_t = sym_solve(&innovation, &h_sigma)?;
    Ok(gain_t.transpose())
}

/// Operator 2-norm of a general matrix.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.amax()
}
