use nalgebra::{DMatrix, DVector};

use crate::error::{KqtError, Result};

/// A set of `d`-dimensional points stored row-major.
///
/// Every coordinate is finite and every point has the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(KqtError::InvalidParameter("dimension must be >= 1".into()));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(KqtError::DimensionMismatch {
                expected: dim,
                got: values.len() % dim,
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(KqtError::NonFinite {
                point: pos / dim,
                coord: pos % dim,
            });
        }
        Ok(Dataset { dim, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(KqtError::TooFewPoints { needed: 1, got: 0 })?;
        let mut values = Vec::with_capacity(dim * rows.len());
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(KqtError::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Dataset::new(dim, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Selects the given rows, in order, into a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            values,
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim);
        for row in self.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean / self.len().max(1) as f64
    }

    /// Covariance with the given denominator offset (`n - ddof`).
    pub fn covariance(&self, ddof: usize) -> DMatrix<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut cov = DMatrix::zeros(d, d);
        let mut centered = vec![0.0; d];
        for row in self.rows() {
            for k in 0..d {
                centered[k] = row[k] - mean[k];
            }
            for a in 0..d {
                for b in a..d {
                    cov[(a, b)] += centered[a] * centered[b];
                }
            }
        }
        let denom = (self.len().saturating_sub(ddof)).max(1) as f64;
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        cov
    }

    /// Applies `x -> A x + b` to every point.
    pub fn affine(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Dataset {
        let d = self.dim;
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.rows() {
            for i in 0..d {
                let mut acc = b[i];
                for j in 0..d {
                    acc += a[(i, j)] * row[j];
                }
                values.push(acc);
            }
        }
        Dataset { dim: d, values }
    }
}
