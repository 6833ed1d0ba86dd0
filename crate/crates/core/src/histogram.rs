//! The fitted histogram model: an ordered list of kernel bins closed by a
//! residual bin, and its JSON model file.

use serde::{Deserialize, Serialize};

use crate::error::{KqtError, Result};
use crate::kernel::{self, KernelKind, MetricContext};
use crate::linalg::Whitener;

pub const MODEL_VERSION: u32 = 1;

/// One histogram bin. Bins are tested in order; the first match wins.
#[derive(Debug, Clone, PartialEq)]
pub enum Bin {
    /// `{x : f(x, centroid) <= radius}`.
    Ball { centroid: Vec<f64>, radius: f64 },
    /// `{x : sign * x[axis] <= split}`.
    HalfSpace { axis: usize, sign: f64, split: f64 },
    /// Everything not claimed by an earlier bin.
    Residual,
}

impl Bin {
    pub fn is_residual(&self) -> bool {
        matches!(self, Bin::Residual)
    }
}

#[derive(Serialize, Deserialize)]
struct BinRepr {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    centroid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    axis: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    sign: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    radius: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    residual: bool,
}

impl From<&Bin> for BinRepr {
    fn from(b: &Bin) -> Self {
        let empty = BinRepr {
            centroid: None,
            axis: None,
            sign: None,
            radius: None,
            residual: false,
        };
        match b {
            Bin::Ball { centroid, radius } => BinRepr {
                centroid: Some(centroid.clone()),
                radius: Some(*radius),
                ..empty
            },
            Bin::HalfSpace { axis, sign, split } => BinRepr {
                axis: Some(*axis),
                sign: Some(*sign),
                radius: Some(*split),
                ..empty
            },
            Bin::Residual => BinRepr {
                residual: true,
                ..empty
            },
        }
    }
}

impl TryFrom<BinRepr> for Bin {
    type Error = KqtError;

    fn try_from(r: BinRepr) -> Result<Self> {
        match r {
            BinRepr { residual: true, .. } => Ok(Bin::Residual),
            BinRepr {
                centroid: Some(centroid),
                radius: Some(radius),
                ..
            } => Ok(Bin::Ball { centroid, radius }),
            BinRepr {
                axis: Some(axis),
                sign: Some(sign),
                radius: Some(split),
                ..
            } => Ok(Bin::HalfSpace { axis, sign, split }),
            _ => Err(KqtError::InvalidArtifact("malformed bin entry".into())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    kind: String,
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    pi: Vec<f64>,
    counts: Vec<usize>,
    metric: MetricContext,
    bins: Vec<BinRepr>,
}

/// Precomputed per-bin data for fast assignment.
///
/// Centroid kernels with a Mahalanobis-type metric are evaluated in
/// whitened coordinates: a sample is mapped once through every component
/// whitener and each bin then costs `O(M d)`.
#[derive(Debug, Clone)]
pub(crate) enum Evaluator {
    Whitened {
        whiteners: Vec<Whitener>,
        /// Per bin: the centroid mapped through every whitener, concatenated.
        centroids: Vec<Vec<f64>>,
        /// Per bin: component weights at the centroid.
        weights: Vec<Vec<f64>>,
        radii: Vec<f64>,
    },
    Lp {
        p: f64,
        centroids: Vec<Vec<f64>>,
        radii: Vec<f64>,
    },
    Axis {
        axes: Vec<usize>,
        signs: Vec<f64>,
        splits: Vec<f64>,
    },
}

impl Evaluator {
    fn build(metric: &MetricContext, bins: &[Bin]) -> Result<Self> {
        let bounded = &bins[..bins.len() - 1];
        match metric {
            MetricContext::Mahalanobis { .. } | MetricContext::WeightedMahalanobis { .. } => {
                let whiteners: Vec<Whitener> = match metric {
                    MetricContext::Mahalanobis { whitener, .. } => vec![whitener.clone()],
                    MetricContext::WeightedMahalanobis { mixture } => mixture.whiteners().to_vec(),
                    _ => unreachable!(),
                };
                let mut centroids = Vec::with_capacity(bounded.len());
                let mut weights = Vec::with_capacity(bounded.len());
                let mut radii = Vec::with_capacity(bounded.len());
                for b in bounded {
                    let Bin::Ball { centroid, radius } = b else {
                        return Err(KqtError::InvalidArtifact(
                            "centroid metric with a non-ball bin".into(),
                        ));
                    };
                    let (_, w) = metric.whitened_parts(centroid).expect("whitened metric");
                    centroids.push(prepare(&whiteners, centroid));
                    weights.push(w);
                    radii.push(*radius);
                }
                Ok(Evaluator::Whitened {
                    whiteners,
                    centroids,
                    weights,
                    radii,
                })
            }
            MetricContext::Lp { p } => {
                let mut centroids = Vec::new();
                let mut radii = Vec::new();
                for b in bounded {
                    let Bin::Ball { centroid, radius } = b else {
                        return Err(KqtError::InvalidArtifact(
                            "Lp metric with a non-ball bin".into(),
                        ));
                    };
                    centroids.push(centroid.clone());
                    radii.push(*radius);
                }
                Ok(Evaluator::Lp {
                    p: *p,
                    centroids,
                    radii,
                })
            }
            MetricContext::AxisAligned => {
                let mut axes = Vec::new();
                let mut signs = Vec::new();
                let mut splits = Vec::new();
                for b in bounded {
                    let Bin::HalfSpace { axis, sign, split } = b else {
                        return Err(KqtError::InvalidArtifact(
                            "axis metric with a non-half-space bin".into(),
                        ));
                    };
                    axes.push(*axis);
                    signs.push(*sign);
                    splits.push(*split);
                }
                Ok(Evaluator::Axis {
                    axes,
                    signs,
                    splits,
                })
            }
        }
    }

    /// Length of the scratch buffer `assign` needs.
    pub(crate) fn scratch_len(&self, dim: usize) -> usize {
        match self {
            Evaluator::Whitened { whiteners, .. } => whiteners.len() * dim,
            _ => 0,
        }
    }

    /// Index of the first bin containing `x` (the residual if none).
    #[inline]
    pub(crate) fn assign(&self, x: &[f64], scratch: &mut [f64]) -> usize {
        match self {
            Evaluator::Whitened {
                whiteners,
                centroids,
                weights,
                radii,
            } => {
                let d = x.len();
                for (w, out) in whiteners.iter().zip(scratch.chunks_exact_mut(d)) {
                    w.apply(x, out);
                }
                let u = &scratch[..whiteners.len() * d];
                for (j, r) in radii.iter().enumerate() {
                    if whitened_distance(u, &centroids[j], &weights[j], d) <= *r {
                        return j;
                    }
                }
                radii.len()
            }
            Evaluator::Lp {
                p,
                centroids,
                radii,
            } => {
                for (j, (c, r)) in centroids.iter().zip(radii).enumerate() {
                    if kernel::lp_distance(x, c, *p) <= *r {
                        return j;
                    }
                }
                radii.len()
            }
            Evaluator::Axis {
                axes,
                signs,
                splits,
            } => {
                for (j, ((a, s), r)) in axes.iter().zip(signs).zip(splits).enumerate() {
                    if s * x[*a] <= *r {
                        return j;
                    }
                }
                splits.len()
            }
        }
    }
}

/// Concatenated whitened images of `x`, one block of `d` per whitener.
pub(crate) fn prepare(whiteners: &[Whitener], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; whiteners.len() * d];
    for (w, o) in whiteners.iter().zip(out.chunks_exact_mut(d)) {
        w.apply(x, o);
    }
    out
}

/// `sum_m weight_m * |u_m - c_m|` over per-component blocks of length `d`.
#[inline]
pub(crate) fn whitened_distance(u: &[f64], c: &[f64], weights: &[f64], d: usize) -> f64 {
    let mut total = 0.0;
    for ((ub, cb), w) in u.chunks_exact(d).zip(c.chunks_exact(d)).zip(weights) {
        let sq: f64 = ub.iter().zip(cb).map(|(a, b)| (a - b) * (a - b)).sum();
        total += w * sq.sqrt();
    }
    total
}

/// A KQT (or QT) histogram fitted on a training set.
#[derive(Debug, Clone)]
pub struct Histogram {
    dim: usize,
    bins: Vec<Bin>,
    metric: MetricContext,
    target_probs: Vec<f64>,
    counts: Vec<usize>,
    train_size: usize,
    evaluator: Evaluator,
}

impl PartialEq for Histogram {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.bins == other.bins
            && self.metric == other.metric
            && self.target_probs == other.target_probs
            && self.counts == other.counts
            && self.train_size == other.train_size
    }
}

impl Histogram {
    /// Assembles and validates a histogram.
    pub fn new(
        dim: usize,
        bins: Vec<Bin>,
        metric: MetricContext,
        target_probs: Vec<f64>,
        counts: Vec<usize>,
    ) -> Result<Self> {
        let k = bins.len();
        if k < 2 {
            return Err(KqtError::InvalidArtifact("need at least two bins".into()));
        }
        if target_probs.len() != k || counts.len() != k {
            return Err(KqtError::InvalidArtifact(format!(
                "{k} bins but {} probabilities and {} counts",
                target_probs.len(),
                counts.len()
            )));
        }
        validate_probs(&target_probs)?;
        if !bins[k - 1].is_residual() || bins[..k - 1].iter().any(Bin::is_residual) {
            return Err(KqtError::InvalidArtifact(
                "exactly one residual bin, in last position".into(),
            ));
        }
        if let Some(md) = metric.dim() {
            if md != dim {
                return Err(KqtError::DimensionMismatch {
                    expected: dim,
                    got: md,
                });
            }
        }
        for b in &bins {
            match b {
                Bin::Ball { centroid, radius } => {
                    if centroid.len() != dim {
                        return Err(KqtError::DimensionMismatch {
                            expected: dim,
                            got: centroid.len(),
                        });
                    }
                    if !(radius.is_finite() && *radius >= 0.0)
                        || centroid.iter().any(|v| !v.is_finite())
                    {
                        return Err(KqtError::InvalidArtifact(
                            "ball bins need a finite centroid and radius".into(),
                        ));
                    }
                }
                Bin::HalfSpace { axis, sign, split } => {
                    if *axis >= dim || (*sign != 1.0 && *sign != -1.0) || !split.is_finite() {
                        return Err(KqtError::InvalidArtifact("malformed half-space bin".into()));
                    }
                }
                Bin::Residual => {}
            }
        }
        let train_size = counts.iter().sum();
        let evaluator = Evaluator::build(&metric, &bins)?;
        Ok(Histogram {
            dim,
            bins,
            metric,
            target_probs,
            counts,
            train_size,
            evaluator,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of bins `K`, residual included.
    pub fn bins_len(&self) -> usize {
        self.bins.len()
    }

    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }

    pub fn metric(&self) -> &MetricContext {
        &self.metric
    }

    pub fn kind(&self) -> KernelKind {
        self.metric.kind()
    }

    pub fn target_probs(&self) -> &[f64] {
        &self.target_probs
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn train_size(&self) -> usize {
        self.train_size
    }

    /// Bin index of `x`, zero-based; `K - 1` is the residual bin.
    pub fn assign_bin(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(KqtError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut scratch = vec![0.0; self.evaluator.scratch_len(self.dim)];
        Ok(self.evaluator.assign(x, &mut scratch))
    }

    /// Reusable assignment buffer for hot loops.
    pub fn assigner(&self) -> Assigner<'_> {
        Assigner {
            hist: self,
            scratch: vec![0.0; self.evaluator.scratch_len(self.dim)],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_VERSION,
            kind: self.kind().name().to_string(),
            d: self.dim,
            k: self.bins.len(),
            n: self.train_size,
            pi: self.target_probs.clone(),
            counts: self.counts.clone(),
            metric: self.metric.clone(),
            bins: self.bins.iter().map(BinRepr::from).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.version != MODEL_VERSION {
            return Err(KqtError::Version {
                found: file.version,
                expected: MODEL_VERSION,
            });
        }
        let bins = file
            .bins
            .into_iter()
            .map(Bin::try_from)
            .collect::<Result<Vec<_>>>()?;
        if bins.len() != file.k {
            return Err(KqtError::InvalidArtifact(format!(
                "K = {} but {} bins listed",
                file.k,
                bins.len()
            )));
        }
        if file.kind != file.metric.kind().name() {
            return Err(KqtError::InvalidArtifact(format!(
                "kind '{}' does not match metric '{}'",
                file.kind,
                file.metric.kind().name()
            )));
        }
        let h = Histogram::new(file.d, bins, file.metric, file.pi, file.counts)?;
        if h.train_size != file.n {
            return Err(KqtError::InvalidArtifact(format!(
                "N = {} but counts sum to {}",
                file.n, h.train_size
            )));
        }
        Ok(h)
    }
}

/// Bin assignment with a preallocated scratch buffer.
pub struct Assigner<'a> {
    hist: &'a Histogram,
    scratch: Vec<f64>,
}

impl Assigner<'_> {
    #[inline]
    pub fn assign(&mut self, x: &[f64]) -> Result<usize> {
        if x.len() != self.hist.dim {
            return Err(KqtError::DimensionMismatch {
                expected: self.hist.dim,
                got: x.len(),
            });
        }
        Ok(self.hist.evaluator.assign(x, &mut self.scratch))
    }
}

pub(crate) fn validate_probs(pi: &[f64]) -> Result<()> {
    if pi.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(KqtError::InvalidParameter(
            "target probabilities must be > 0".into(),
        ));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(KqtError::InvalidParameter(format!(
            "target probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// `K` equal target probabilities.
pub fn uniform_probs(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}
