//! Histogram construction.
//!
//! Bins are carved one at a time from the training points not yet claimed.
//! For centroid kernels, `V` candidate centroids are drawn from the
//! remaining points; each candidate defines a ball whose radius is the
//! `L_k`-th smallest kernel value, and the candidate whose split yields the
//! largest information gain is kept. Every bounded bin therefore holds
//! exactly `L_k` training points and the residual bin holds the rest.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng as _;

use crate::data::Dataset;
use crate::error::{KqtError, Result};
use crate::histogram::{self, Bin, Histogram};
use crate::kernel::{self, KernelKind, MetricContext};
use crate::linalg;
use crate::rng;

/// Construction parameters. Defaults: `K = 32`, uniform targets, `V = 250`,
/// Mahalanobis kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub bins: usize,
    /// `None` means uniform `1/K`.
    pub target_probs: Option<Vec<f64>>,
    pub candidates: usize,
    pub kernel: KernelKind,
    pub seed: u64,
    /// Add tiny uniform noise before building, to break repeated values.
    pub jitter: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            bins: 32,
            target_probs: None,
            candidates: 250,
            kernel: KernelKind::Mahalanobis,
            seed: 0,
            jitter: false,
        }
    }
}

impl BuildConfig {
    pub fn resolved_probs(&self) -> Vec<f64> {
        self.target_probs
            .clone()
            .unwrap_or_else(|| histogram::uniform_probs(self.bins))
    }

    fn validate(&self) -> Result<Vec<f64>> {
        if self.bins < 2 {
            return Err(KqtError::InvalidParameter("K must be >= 2".into()));
        }
        if self.candidates == 0 {
            return Err(KqtError::InvalidParameter("V must be >= 1".into()));
        }
        let pi = self.resolved_probs();
        if pi.len() != self.bins {
            return Err(KqtError::InvalidParameter(format!(
                "{} target probabilities for K = {}",
                pi.len(),
                self.bins
            )));
        }
        histogram::validate_probs(&pi)?;
        Ok(pi)
    }
}

/// Per-bin training counts: largest-remainder rounding of `N * pi_j`,
/// ties going to the lower index, with every count at least one.
pub fn bin_counts(n: usize, pi: &[f64]) -> Result<Vec<usize>> {
    let k = pi.len();
    if n < k {
        return Err(KqtError::TooFewPoints { needed: k, got: n });
    }
    let exact: Vec<f64> = pi.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    // stable sort keeps lower indices first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    for &j in order.iter().take(n.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    while let Some(z) = counts.iter().position(|&c| c == 0) {
        let big = (0..k)
            .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
            .unwrap();
        counts[big] -= 1;
        counts[z] = 1;
    }
    Ok(counts)
}

/// Gaussian differential entropy of a point set, in nats:
/// `0.5 * log((2 pi e)^d det(cov[B] + ridge))`.
pub fn entropy(points: &Dataset) -> Result<f64> {
    if points.len() < 2 {
        return Err(KqtError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    Ok(gaussian_entropy(points.covariance(1)))
}

fn gaussian_entropy(mut cov: DMatrix<f64>) -> f64 {
    let d = cov.nrows() as f64;
    linalg::regularize(&mut cov);
    let log_det = match linalg::log_det_spd(&cov) {
        Ok(v) => v,
        Err(_) => {
            // Cancellation in the moment formula can leave a tiny negative
            // eigenvalue; clamp onto the ridge instead.
            let floor = linalg::RIDGE * (cov.trace() / d).max(f64::MIN_POSITIVE);
            cov.symmetric_eigenvalues()
                .iter()
                .map(|v| v.max(floor).ln())
                .sum()
        }
    };
    0.5 * (d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_det)
}

/// `H(B) - |B_in|/|B| H(B_in) - |B_out|/|B| H(B_out)`.
///
/// A part with fewer than two points contributes nothing.
pub fn information_gain(points: &Dataset, inside: &[bool]) -> Result<f64> {
    if inside.len() != points.len() {
        return Err(KqtError::DimensionMismatch {
            expected: points.len(),
            got: inside.len(),
        });
    }
    let total = Moments::of(points, 0..points.len());
    let inner = Moments::of(points, (0..points.len()).filter(|&i| inside[i]));
    Ok(total.gain(&inner))
}

/// Radius of a split holding exactly `l` of the sorted kernel values.
///
/// Fails with `TiesDetected` when the `l`-th and `(l+1)`-th values coincide.
pub fn split_radius(sorted: &[f64], l: usize) -> Result<f64> {
    if l == 0 || l > sorted.len() {
        return Err(KqtError::InvalidParameter(format!(
            "cannot take {l} of {} values",
            sorted.len()
        )));
    }
    if l < sorted.len() && sorted[l - 1] == sorted[l] {
        return Err(KqtError::TiesDetected { bin: None });
    }
    Ok(sorted[l - 1])
}

/// Running first and second moments of a point set (centred coordinates).
#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
}

impl Moments {
    fn zero(d: usize) -> Self {
        Moments {
            n: 0,
            sum: DVector::zeros(d),
            outer: DMatrix::zeros(d, d),
        }
    }

    fn of(points: &Dataset, idx: impl Iterator<Item = usize>) -> Self {
        let mut m = Moments::zero(points.dim());
        for i in idx {
            m.add(points.row(i));
        }
        m
    }

    #[inline]
    fn add(&mut self, x: &[f64]) {
        let d = x.len();
        self.n += 1;
        for a in 0..d {
            self.sum[a] += x[a];
            for b in a..d {
                self.outer[(a, b)] += x[a] * x[b];
            }
        }
    }

    fn minus(&self, other: &Moments) -> Moments {
        Moments {
            n: self.n - other.n,
            sum: &self.sum - &other.sum,
            outer: &self.outer - &other.outer,
        }
    }

    /// Entropy, or `None` below two points.
    fn entropy(&self) -> Option<f64> {
        if self.n < 2 {
            return None;
        }
        let d = self.sum.len();
        let n = self.n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let v = (self.outer[(a, b)] - self.sum[a] * self.sum[b] / n) / (n - 1.0);
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        Some(gaussian_entropy(cov))
    }

    fn gain(&self, inner: &Moments) -> f64 {
        let outer = self.minus(inner);
        let n = self.n as f64;
        let h = self.entropy().unwrap_or(0.0);
        let hin = inner.entropy().map_or(0.0, |e| inner.n as f64 / n * e);
        let hout = outer.entropy().map_or(0.0, |e| outer.n as f64 / n * e);
        h - hin - hout
    }
}

/// Copy of `data` with uniform noise of magnitude `1e-9 * scale` added to
/// every coordinate, `scale` being the largest per-dimension range.
pub fn jitter(data: &Dataset, seed: u64) -> Dataset {
    let d = data.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in data.rows() {
        for k in 0..d {
            lo[k] = lo[k].min(row[k]);
            hi[k] = hi[k].max(row[k]);
        }
    }
    let scale = (0..d).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut r = rng::rng(seed, "jitter", 0);
    let values = data
        .as_slice()
        .iter()
        .map(|v| v + 1e-9 * scale * r.random_range(-1.0..1.0))
        .collect();
    Dataset::new(d, values).expect("jitter keeps values finite")
}

/// Builds a histogram over `train`.
pub fn build_histogram(train: &Dataset, cfg: &BuildConfig) -> Result<Histogram> {
    let pi = cfg.validate()?;
    let n = train.len();
    let k = cfg.bins;
    let counts = bin_counts(n, &pi)?;
    let jittered;
    let data = if cfg.jitter {
        jittered = jitter(train, cfg.seed);
        &jittered
    } else {
        train
    };
    let d = data.dim();
    let metric = MetricContext::fit(cfg.kernel, data, rng::derive(cfg.seed, "metric", 0))?;

    // Centred copy for the entropy moments.
    let mean = data.mean();
    let centred = Dataset::new(
        d,
        data.rows()
            .flat_map(|r| r.iter().zip(mean.iter()).map(|(a, b)| a - b))
            .collect(),
    )?;

    let mut remaining: Vec<usize> = (0..n).collect();
    let mut bins = Vec::with_capacity(k);

    if matches!(metric, MetricContext::AxisAligned) {
        let mut proj: Vec<(f64, usize)> = Vec::with_capacity(n);
        for (step, &l) in counts[..k - 1].iter().enumerate() {
            let mut r = rng::rng(cfg.seed, "axis", step as u64);
            let axis = r.random_range(0..d);
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            proj.clear();
            proj.extend(
                remaining
                    .iter()
                    .enumerate()
                    .map(|(pos, &i)| (sign * data.row(i)[axis], pos)),
            );
            let split = order_split(&mut proj, l).map_err(|e| tag_bin(e, step))?;
            let inside: Vec<usize> = proj[..l].iter().map(|&(_, pos)| pos).collect();
            remove_positions(&mut remaining, inside);
            bins.push(Bin::HalfSpace { axis, sign, split });
        }
    } else {
        let whiteners: Option<Vec<_>> = match &metric {
            MetricContext::Mahalanobis { whitener, .. } => Some(vec![whitener.clone()]),
            MetricContext::WeightedMahalanobis { mixture } => Some(mixture.whiteners().to_vec()),
            _ => None,
        };
        let prepared: Option<Vec<Vec<f64>>> = whiteners
            .as_ref()
            .map(|w| data.rows().map(|x| histogram::prepare(w, x)).collect());
        let p = match metric {
            MetricContext::Lp { p } => p,
            _ => 2.0,
        };

        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
        for (step, &l) in counts[..k - 1].iter().enumerate() {
            let total = Moments::of(&centred, remaining.iter().copied());
            let nrem = remaining.len();
            let mut r = rng::rng(cfg.seed, "candidates", step as u64);
            let picks = index::sample(&mut r, nrem, cfg.candidates.min(nrem));

            let mut best: Option<(f64, usize, f64, Vec<usize>)> = None;
            let mut saw_tie = false;
            for pick in picks.iter() {
                let centre = remaining[pick];
                dist.clear();
                match &prepared {
                    Some(prepared) => {
                        let c = &prepared[centre];
                        let (_, weights) = metric.whitened_parts(data.row(centre)).unwrap();
                        for (pos, &i) in remaining.iter().enumerate() {
                            dist.push((
                                histogram::whitened_distance(&prepared[i], c, &weights, d),
                                pos,
                            ));
                        }
                    }
                    None => {
                        let c = data.row(centre);
                        for (pos, &i) in remaining.iter().enumerate() {
                            dist.push((kernel::lp_distance(data.row(i), c, p), pos));
                        }
                    }
                }
                let radius = match order_split(&mut dist, l) {
                    Ok(r) => r,
                    Err(KqtError::TiesDetected { .. }) => {
                        saw_tie = true;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let mut inner = Moments::zero(d);
                for &(_, pos) in &dist[..l] {
                    inner.add(centred.row(remaining[pos]));
                }
                let gain = total.gain(&inner);
                if best.as_ref().is_none_or(|b| gain > b.0) {
                    let inside = dist[..l].iter().map(|&(_, pos)| pos).collect();
                    best = Some((gain, centre, radius, inside));
                }
            }
            let Some((_, centre, radius, inside)) = best else {
                debug_assert!(saw_tie);
                return Err(KqtError::TiesDetected { bin: Some(step) });
            };
            remove_positions(&mut remaining, inside);
            bins.push(Bin::Ball {
                centroid: data.row(centre).to_vec(),
                radius,
            });
        }
    }
    debug_assert_eq!(remaining.len(), counts[k - 1]);
    bins.push(Bin::Residual);
    Histogram::new(d, bins, metric, pi, counts)
}

/// Partially orders `values` so the `l` smallest come first and returns the
/// `l`-th smallest, refusing a tie with the next one.
fn order_split(values: &mut [(f64, usize)], l: usize) -> Result<f64> {
    if l == 0 || l >= values.len() {
        return Err(KqtError::InvalidParameter(format!(
            "cannot split {l} of {} values",
            values.len()
        )));
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0);
    values.select_nth_unstable_by(l - 1, cmp);
    let radius = values[l - 1].0;
    let next = values[l..]
        .iter()
        .map(|v| v.0)
        .fold(f64::INFINITY, f64::min);
    if next == radius {
        return Err(KqtError::TiesDetected { bin: None });
    }
    Ok(radius)
}

fn tag_bin(e: KqtError, step: usize) -> KqtError {
    match e {
        KqtError::TiesDetected { .. } => KqtError::TiesDetected { bin: Some(step) },
        e => e,
    }
}

fn remove_positions(remaining: &mut Vec<usize>, mut positions: Vec<usize>) {
    positions.sort_unstable();
    let mut it = positions.into_iter().peekable();
    let mut pos = 0;
    remaining.retain(|_| {
        let drop = it.peek() == Some(&pos);
        if drop {
            it.next();
        }
        pos += 1;
        !drop
    });
}
