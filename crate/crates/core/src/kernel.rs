//! Kernel functions that define bins: a distance from a centroid under a
//! fitted metric, or a signed coordinate projection for the axis-aligned
//! baseline.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{KqtError, Result};
use crate::gmm::{self, GaussianMixture};
use crate::linalg::{self, Whitener};

/// Which kernel family a histogram uses, with its fitting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    Mahalanobis,
    /// Mixture-aware Mahalanobis with `components` Gaussians fitted by EM.
    #[serde(rename = "wm")]
    WeightedMahalanobis {
        components: usize,
    },
    Lp {
        p: f64,
    },
    /// Signed single-coordinate projections (QuantTree-style splits).
    #[serde(rename = "axis")]
    AxisAligned,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Mahalanobis => "mahalanobis",
            KernelKind::WeightedMahalanobis { .. } => "wm",
            KernelKind::Lp { .. } => "lp",
            KernelKind::AxisAligned => "axis",
        }
    }

    pub fn uses_centroids(&self) -> bool {
        !matches!(self, KernelKind::AxisAligned)
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::WeightedMahalanobis { components } => write!(f, "wm(M={components})"),
            KernelKind::Lp { p } => write!(f, "lp(p={p})"),
            k => f.write_str(k.name()),
        }
    }
}

impl FromStr for KernelKind {
    type Err = KqtError;

    /// Parses `mahalanobis`, `wm`, `lp` or `axis` with default parameters
    /// (`M = 4`, `p = 2`).
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mahalanobis" | "maha" => Ok(KernelKind::Mahalanobis),
            "wm" | "weighted-mahalanobis" => Ok(KernelKind::WeightedMahalanobis { components: 4 }),
            "lp" => Ok(KernelKind::Lp { p: 2.0 }),
            "axis" | "qt" => Ok(KernelKind::AxisAligned),
            other => Err(KqtError::InvalidParameter(format!(
                "unknown kernel '{other}'"
            ))),
        }
    }
}

/// The fitted metric shared by every bin of a histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MetricRepr", into = "MetricRepr")]
pub enum MetricContext {
    Mahalanobis {
        inverse_covariance: DMatrix<f64>,
        whitener: Whitener,
    },
    WeightedMahalanobis {
        mixture: GaussianMixture,
    },
    Lp {
        p: f64,
    },
    AxisAligned,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricRepr {
    Mahalanobis { inverse_covariance: Vec<Vec<f64>> },
    Wm { mixture: GaussianMixture },
    Lp { p: f64 },
    Axis,
}

impl TryFrom<MetricRepr> for MetricContext {
    type Error = KqtError;

    fn try_from(r: MetricRepr) -> Result<Self> {
        match r {
            MetricRepr::Mahalanobis { inverse_covariance } => {
                let d = inverse_covariance.len();
                if d == 0 || inverse_covariance.iter().any(|row| row.len() != d) {
                    return Err(KqtError::InvalidArtifact(
                        "inverse covariance must be a non-empty square matrix".into(),
                    ));
                }
                MetricContext::mahalanobis(DMatrix::from_fn(d, d, |i, j| inverse_covariance[i][j]))
            }
            MetricRepr::Wm { mixture } => Ok(MetricContext::WeightedMahalanobis { mixture }),
            MetricRepr::Lp { p } => MetricContext::lp(p),
            MetricRepr::Axis => Ok(MetricContext::AxisAligned),
        }
    }
}

impl From<MetricContext> for MetricRepr {
    fn from(m: MetricContext) -> Self {
        match m {
            MetricContext::Mahalanobis {
                inverse_covariance, ..
            } => {
                let d = inverse_covariance.nrows();
                MetricRepr::Mahalanobis {
                    inverse_covariance: (0..d)
                        .map(|i| (0..d).map(|j| inverse_covariance[(i, j)]).collect())
                        .collect(),
                }
            }
            MetricContext::WeightedMahalanobis { mixture } => MetricRepr::Wm { mixture },
            MetricContext::Lp { p } => MetricRepr::Lp { p },
            MetricContext::AxisAligned => MetricRepr::Axis,
        }
    }
}

impl MetricContext {
    /// Mahalanobis metric from a precision (inverse-covariance) matrix.
    pub fn mahalanobis(inverse_covariance: DMatrix<f64>) -> Result<Self> {
        if !linalg::is_symmetric(&inverse_covariance, 1e-9) {
            return Err(KqtError::NotPositiveDefinite(
                "inverse covariance is not symmetric".into(),
            ));
        }
        let whitener = Whitener::from_precision(&inverse_covariance)?;
        Ok(MetricContext::Mahalanobis {
            inverse_covariance,
            whitener,
        })
    }

    /// Mahalanobis metric from a covariance matrix (regularised first).
    pub fn mahalanobis_from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let mut cov = cov.clone();
        linalg::regularize(&mut cov);
        let inv = cov
            .try_inverse()
            .ok_or_else(|| KqtError::NotPositiveDefinite("covariance is singular".into()))?;
        let sym = (&inv + inv.transpose()) * 0.5;
        MetricContext::mahalanobis(sym)
    }

    pub fn lp(p: f64) -> Result<Self> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(KqtError::InvalidParameter(format!(
                "Lp exponent must be finite and >= 1, got {p}"
            )));
        }
        Ok(MetricContext::Lp { p })
    }

    /// Fits the metric for `kind` on a training set.
    pub fn fit(kind: KernelKind, data: &Dataset, seed: u64) -> Result<Self> {
        match kind {
            KernelKind::Mahalanobis => {
                if data.len() < 2 {
                    return Err(KqtError::TooFewPoints {
                        needed: 2,
                        got: data.len(),
                    });
                }
                MetricContext::mahalanobis_from_covariance(&data.covariance(1))
            }
            KernelKind::WeightedMahalanobis { components } => {
                Ok(MetricContext::WeightedMahalanobis {
                    mixture: gmm::fit_gmm(data, components, seed)?,
                })
            }
            KernelKind::Lp { p } => MetricContext::lp(p),
            KernelKind::AxisAligned => Ok(MetricContext::AxisAligned),
        }
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            MetricContext::Mahalanobis { .. } => KernelKind::Mahalanobis,
            MetricContext::WeightedMahalanobis { mixture } => KernelKind::WeightedMahalanobis {
                components: mixture.components(),
            },
            MetricContext::Lp { p } => KernelKind::Lp { p: *p },
            MetricContext::AxisAligned => KernelKind::AxisAligned,
        }
    }

    /// Dimension fixed by the metric, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            MetricContext::Mahalanobis {
                inverse_covariance, ..
            } => Some(inverse_covariance.nrows()),
            MetricContext::WeightedMahalanobis { mixture } => Some(mixture.dim()),
            _ => None,
        }
    }

    /// Whiteners and per-component weights used at a centroid.
    ///
    /// Mahalanobis is the single-component case with weight one.
    pub(crate) fn whitened_parts(&self, centroid: &[f64]) -> Option<(Vec<&Whitener>, Vec<f64>)> {
        match self {
            MetricContext::Mahalanobis { whitener, .. } => Some((vec![whitener], vec![1.0])),
            MetricContext::WeightedMahalanobis { mixture } => Some((
                mixture.whiteners().iter().collect(),
                mixture.responsibilities(centroid),
            )),
            _ => None,
        }
    }
}

/// Distance between `x` and a centroid `c` under the metric.
///
/// The weighted Mahalanobis distance is
/// `sum_m gamma_m(c) * sqrt((x-c)' Sigma_m^-1 (x-c))`, with `gamma_m(c)` the
/// posterior weight of component `m` at the centroid.
pub fn kernel_distance(x: &[f64], c: &[f64], ctx: &MetricContext) -> Result<f64> {
    if x.len() != c.len() {
        return Err(KqtError::DimensionMismatch {
            expected: c.len(),
            got: x.len(),
        });
    }
    if let Some(d) = ctx.dim() {
        if x.len() != d {
            return Err(KqtError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
    }
    match ctx {
        MetricContext::Mahalanobis { whitener, .. } => Ok(whitener.distance(x, c)),
        MetricContext::WeightedMahalanobis { mixture } => {
            let gamma = mixture.responsibilities(c);
            Ok(mixture
                .whiteners()
                .iter()
                .zip(gamma)
                .map(|(w, g)| g * w.distance(x, c))
                .sum())
        }
        MetricContext::Lp { p } => Ok(lp_distance(x, c, *p)),
        MetricContext::AxisAligned => Err(KqtError::InvalidParameter(
            "axis-aligned kernel has no centroid distance".into(),
        )),
    }
}

#[inline]
pub(crate) fn lp_distance(x: &[f64], c: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        linalg::euclidean(x, c)
    } else if p == 1.0 {
        x.iter().zip(c).map(|(a, b)| (a - b).abs()).sum()
    } else {
        x.iter()
            .zip(c)
            .map(|(a, b)| (a - b).abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}
