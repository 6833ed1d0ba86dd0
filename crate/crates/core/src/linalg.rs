//! Small dense linear-algebra helpers shared by the kernels, the entropy
//! estimator and the mixture fit.

use nalgebra::DMatrix;

use crate::error::{KqtError, Result};

/// Relative ridge added to every covariance before it is factorised.
pub const RIDGE: f64 = 1e-6;

/// Adds `RIDGE * trace(S)/d * I` in place.
///
/// A zero-trace matrix (all points identical) falls back to unit scale so
/// the result is still positive-definite.
pub fn regularize(cov: &mut DMatrix<f64>) {
    let d = cov.nrows();
    let scale = cov.trace() / d as f64;
    let scale = if scale.is_finite() && scale > f64::MIN_POSITIVE {
        scale
    } else {
        1.0
    };
    for i in 0..d {
        cov[(i, i)] += RIDGE * scale;
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(KqtError::NotPositiveDefinite(format!(
            "{}x{} matrix is not square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(KqtError::NotPositiveDefinite("non-finite entry".into()));
    }
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| KqtError::NotPositiveDefinite("Cholesky factorisation failed".into()))
}

/// `log det` of an SPD matrix via its Cholesky factor.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let l = cholesky_lower(m)?;
    Ok(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Dense row-major linear map `u = W x` whose squared output norm is a
/// quadratic form: `xᵀ A x = |W x|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    dim: usize,
    rows: Vec<f64>,
}

impl Whitener {
    /// Whitener for the inverse of `cov`: `|W x|² = xᵀ cov⁻¹ x`.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let l = cholesky_lower(cov)?;
        let inv = l
            .solve_lower_triangular(&DMatrix::identity(cov.nrows(), cov.nrows()))
            .ok_or_else(|| KqtError::NotPositiveDefinite("singular Cholesky factor".into()))?;
        Ok(Self::from_matrix(&inv))
    }

    /// Whitener for a precision matrix `P`: `|W x|² = xᵀ P x`.
    pub fn from_precision(precision: &DMatrix<f64>) -> Result<Self> {
        let r = cholesky_lower(precision)?;
        Ok(Self::from_matrix(&r.transpose()))
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let dim = m.nrows();
        let mut rows = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                rows.push(m[(i, j)]);
            }
        }
        Whitener { dim, rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        for (o, row) in out.iter_mut().zip(self.rows.chunks_exact(self.dim)) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply(x, &mut out);
        out
    }

    /// `sqrt(|W (x - c)|²)`.
    pub fn distance(&self, x: &[f64], c: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(c).map(|(a, b)| a - b).collect();
        let u = self.apply_vec(&diff);
        u.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
