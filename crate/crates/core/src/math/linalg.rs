//! Small dense symmetric-matrix algebra used for corner covariances.
//!
//! Matrices are stored row-major in flat `Vec<f64>` buffers. The corner
//! covariances are 2×2; the joint-corner variant uses 8×8.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw diagonal Cholesky parameters are clamped to this range before `exp`.
pub const RAW_DIAG_CLAMP: f64 = 10.0;

const SINGULAR_DET: f64 = 1e-15;
const SYMMETRY_TOL: f64 = 1e-12;

/// A symmetric positive semi-definite `dim × dim` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl CovMatrix {
    /// Builds a matrix from row-major entries, checking shape, finiteness and symmetry.
    ///
    /// Positive semi-definiteness is not checked here; see [`CovMatrix::is_psd`].
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || entries.len() != dim * dim {
            return Err(Error::InvalidParameter(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite covariance entry".into()));
        }
        for r in 0..dim {
            for c in 0..r {
                let (a, b) = (entries[r * dim + c], entries[c * dim + r]);
                if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::InvalidParameter(format!("matrix not symmetric at ({r},{c}): {a} vs {b}")));
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut m = Self::zeros(dim);
        for d in 0..dim {
            m.entries[d * dim + d] = s;
        }
        m
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let dim = diag.len();
        let mut entries = vec![0.0; dim * dim];
        for (d, v) in diag.iter().enumerate() {
            entries[d * dim + d] = *v;
        }
        Self::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.dim + c]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|d| self.get(d, d)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { dim: self.dim, entries: self.entries.iter().map(|v| v * s).collect() }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &CovMatrix, s: f64) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::Usage(format!("covariance dims differ: {} vs {}", self.dim, other.dim)));
        }
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a + s * b).collect();
        Ok(Self { dim: self.dim, entries })
    }

    /// Eigenvalues in ascending order. 2×2 uses the closed form.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.dim == 2 {
            let (l0, l1) = eig2_sym(self.get(0, 0), self.get(0, 1), self.get(1, 1));
            return vec![l0, l1];
        }
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.entries);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// PSD up to a small relative tolerance on the smallest eigenvalue.
    pub fn is_psd(&self) -> bool {
        let ev = self.eigenvalues();
        let scale = ev.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        ev[0] >= -1e-12 * scale.max(1.0)
    }

    /// Lower Cholesky factor, if the matrix is positive definite.
    pub fn cholesky(&self) -> Option<Vec<f64>> {
        cholesky_lower(&self.entries, self.dim)
    }
}

/// Eigenvalues `(min, max)` of the symmetric matrix `[[a, b], [b, c]]`.
pub fn eig2_sym(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let half_diff = 0.5 * (a - c);
    let r = half_diff.hypot(b);
    (mean - r, mean + r)
}

/// Unconstrained parameterization of a `dim × dim` covariance.
///
/// Layout: `dim` raw diagonal entries first, then the strict lower triangle
/// in row-major order (`l21, l31, l32, ...`).
#[derive(Debug, Clone, PartialEq)]
pub struct CholParams {
    dim: usize,
    raw: Vec<f64>,
}

impl CholParams {
    pub fn new(dim: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != chol_param_count(dim) {
            return Err(Error::InvalidParameter(format!(
                "expected {} raw Cholesky parameters for dim {dim}, got {}",
                chol_param_count(dim),
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite Cholesky parameter".into()));
        }
        Ok(Self { dim, raw })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }
}

pub fn chol_param_count(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Fills the row-major lower-triangular factor `L` from raw parameters.
///
/// Shared with the autodiff op so both paths use identical arithmetic.
pub(crate) fn chol_factor_from_raw(raw: &[f64], dim: usize, l: &mut [f64]) {
    l.iter_mut().for_each(|v| *v = 0.0);
    for d in 0..dim {
        l[d * dim + d] = raw[d].clamp(-RAW_DIAG_CLAMP, RAW_DIAG_CLAMP).exp();
    }
    let mut k = dim;
    for r in 1..dim {
        for c in 0..r {
            l[r * dim + c] = raw[k];
            k += 1;
        }
    }
}

/// `L·Lᵀ` for a row-major lower-triangular `L`.
pub(crate) fn lower_times_transpose(l: &[f64], dim: usize, out: &mut [f64]) {
    for r in 0..dim {
        for c in 0..=r {
            let mut s = 0.0;
            for k in 0..=c {
                s += l[r * dim + k] * l[c * dim + k];
            }
            out[r * dim + c] = s;
            out[c * dim + r] = s;
        }
    }
}

/// Builds `Σ = L·Lᵀ` with `L_dd = exp(clamp(raw_dd))`.
pub fn cholesky_reconstruct(params: &CholParams) -> CovMatrix {
    let dim = params.dim;
    let mut l = vec![0.0; dim * dim];
    chol_factor_from_raw(&params.raw, dim, &mut l);
    let mut entries = vec![0.0; dim * dim];
    lower_times_transpose(&l, dim, &mut entries);
    CovMatrix { dim, entries }
}

/// Natural log of the determinant of a positive-definite matrix.
pub fn logdet(cov: &CovMatrix) -> Result<f64> {
    if cov.dim == 2 {
        let e = &cov.entries;
        let det = e[0] * e[3] - e[1] * e[2];
        if !(det > 0.0) || e[0] <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!("determinant {det}")));
        }
        return Ok(det.ln());
    }
    let l = cov.cholesky().ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    Ok(logdet_from_factor(&l, cov.dim))
}

/// Inverse of a positive-definite matrix.
pub fn mat_inverse(cov: &CovMatrix) -> Result<CovMatrix> {
    let dim = cov.dim;
    if dim == 2 {
        let e = &cov.entries;
        let det = e[0] * e[3] - e[1] * e[2];
        if det.abs() < SINGULAR_DET {
            return Err(Error::Singular(format!("determinant {det}")));
        }
        let off = -e[1] / det;
        return Ok(CovMatrix { dim, entries: vec![e[3] / det, off, off, e[0] / det] });
    }
    let l = cov.cholesky().ok_or_else(|| Error::Singular("Cholesky factorization failed".into()))?;
    if logdet_from_factor(&l, dim) < SINGULAR_DET.ln() {
        return Err(Error::Singular("determinant below threshold".into()));
    }
    Ok(CovMatrix { dim, entries: inverse_from_factor(&l, dim) })
}

/// Lower Cholesky factor `L` with `A = L·Lᵀ`, or `None` if `A` is not positive definite.
pub fn cholesky_lower(a: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for r in 0..dim {
        for c in 0..=r {
            let mut s = a[r * dim + c];
            for k in 0..c {
                s -= l[r * dim + k] * l[c * dim + k];
            }
            if r == c {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[r * dim + r] = s.sqrt();
            } else {
                l[r * dim + c] = s / l[c * dim + c];
            }
        }
    }
    Some(l)
}

pub(crate) fn logdet_from_factor(l: &[f64], dim: usize) -> f64 {
    2.0 * (0..dim).map(|d| l[d * dim + d].ln()).sum::<f64>()
}

/// Solves `L·Lᵀ·x = b` in place.
pub(crate) fn cholesky_solve(l: &[f64], dim: usize, b: &mut [f64]) {
    for r in 0..dim {
        let mut s = b[r];
        for k in 0..r {
            s -= l[r * dim + k] * b[k];
        }
        b[r] = s / l[r * dim + r];
    }
    for r in (0..dim).rev() {
        let mut s = b[r];
        for k in r + 1..dim {
            s -= l[k * dim + r] * b[k];
        }
        b[r] = s / l[r * dim + r];
    }
}

pub(crate) fn inverse_from_factor(l: &[f64], dim: usize) -> Vec<f64> {
    let mut inv = vec![0.0; dim * dim];
    let mut col = vec![0.0; dim];
    for c in 0..dim {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[c] = 1.0;
        cholesky_solve(l, dim, &mut col);
        for r in 0..dim {
            inv[r * dim + c] = col[r];
        }
    }
    // symmetrize
    for r in 0..dim {
        for c in 0..r {
            let m = 0.5 * (inv[r * dim + c] + inv[c * dim + r]);
            inv[r * dim + c] = m;
            inv[c * dim + r] = m;
        }
    }
    inv
}

/// `xᵀ Σ⁻¹ x` for a positive-definite `Σ`.
pub fn mahalanobis_sq(cov: &CovMatrix, x: &[f64]) -> Result<f64> {
    if x.len() != cov.dim {
        return Err(Error::Usage(format!("vector length {} does not match covariance dim {}", x.len(), cov.dim)));
    }
    let l = cov.cholesky().ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    let mut u = x.to_vec();
    cholesky_solve(&l, cov.dim, &mut u);
    Ok(x.iter().zip(&u).map(|(a, b)| a * b).sum())
}
