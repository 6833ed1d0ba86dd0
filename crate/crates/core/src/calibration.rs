//! Monte-Carlo threshold calibration over Dirichlet-drawn bin probabilities.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KqtError, Result};
use crate::histogram::{validate_probs, Histogram};
use crate::monitor::{DetectorState, ExpectedProbs};
use crate::rng::{self, Rng};

pub const TABLE_VERSION: u32 = 1;

/// What happens beyond the last estimated index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailPolicy {
    /// Keep using `h_{t_cut}`.
    Hold,
}

/// Calibrated threshold sequence with the metadata it is valid for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    version: u32,
    alpha: f64,
    arl0: f64,
    lambda: f64,
    #[serde(rename = "K")]
    bins: usize,
    pi: Vec<f64>,
    #[serde(rename = "N")]
    train_size: usize,
    t_cut: usize,
    tail_policy: TailPolicy,
    h: Vec<f64>,
}

impl ThresholdTable {
    /// Assembles and validates a table. Thresholds may be `+inf`.
    pub fn new(
        alpha: f64,
        lambda: f64,
        pi: Vec<f64>,
        train_size: usize,
        h: Vec<f64>,
    ) -> Result<Self> {
        let table = ThresholdTable {
            version: TABLE_VERSION,
            alpha,
            arl0: 1.0 / alpha,
            lambda,
            bins: pi.len(),
            pi,
            train_size,
            t_cut: h.len(),
            tail_policy: TailPolicy::Hold,
            h,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        if self.version != TABLE_VERSION {
            return Err(KqtError::Version {
                found: self.version,
                expected: TABLE_VERSION,
            });
        }
        check_alpha(self.alpha)?;
        if (self.arl0 - 1.0 / self.alpha).abs() > 1e-9 * self.arl0.abs() {
            return Err(KqtError::InvalidArtifact(format!(
                "arl0 {} does not match 1/alpha = {}",
                self.arl0,
                1.0 / self.alpha
            )));
        }
        check_lambda(self.lambda)?;
        if self.bins < 2 || self.pi.len() != self.bins {
            return Err(KqtError::InvalidArtifact(format!(
                "K = {} with {} target probabilities",
                self.bins,
                self.pi.len()
            )));
        }
        validate_probs(&self.pi)?;
        if self.train_size == 0 {
            return Err(KqtError::InvalidArtifact("N must be >= 1".into()));
        }
        if self.t_cut == 0 || self.h.len() != self.t_cut {
            return Err(KqtError::InvalidArtifact(format!(
                "t_cut = {} with {} thresholds",
                self.t_cut,
                self.h.len()
            )));
        }
        if let Some(t) = self.h.iter().position(|h| h.is_nan() || *h <= 0.0) {
            return Err(KqtError::InvalidArtifact(format!(
                "threshold at t = {} is not positive",
                t + 1
            )));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn arl0(&self) -> f64 {
        self.arl0
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn target_probs(&self) -> &[f64] {
        &self.pi
    }

    pub fn train_size(&self) -> usize {
        self.train_size
    }

    pub fn t_cut(&self) -> usize {
        self.t_cut
    }

    pub fn tail_policy(&self) -> TailPolicy {
        self.tail_policy
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.h
    }

    /// `h_t` for `t >= 1`, holding `h_{t_cut}` beyond the table.
    pub fn threshold_at(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(KqtError::InvalidParameter("time index starts at 1".into()));
        }
        Ok(self.threshold_unchecked(t))
    }

    #[inline]
    pub(crate) fn threshold_unchecked(&self, t: usize) -> f64 {
        self.h[t.min(self.t_cut) - 1]
    }

    /// Fails unless the histogram was built for the same K, pi and N.
    pub fn check_compatible(&self, hist: &Histogram) -> Result<()> {
        if hist.bins_len() != self.bins {
            return Err(KqtError::Compatibility(format!(
                "model has K = {}, thresholds have K = {}",
                hist.bins_len(),
                self.bins
            )));
        }
        if hist.train_size() != self.train_size {
            return Err(KqtError::Compatibility(format!(
                "model has N = {}, thresholds have N = {}",
                hist.train_size(),
                self.train_size
            )));
        }
        let same_pi = hist
            .target_probs()
            .iter()
            .zip(&self.pi)
            .all(|(a, b)| (a - b).abs() <= 1e-12);
        if !same_pi {
            return Err(KqtError::Compatibility(
                "model and thresholds use different target probabilities".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let table: ThresholdTable = serde_json::from_str(s)?;
        table.validate()?;
        Ok(table)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(KqtError::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(KqtError::InvalidParameter(format!(
            "lambda must lie in (0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// `1 - (1 - alpha)^t`: probability of a false alarm within `t` steps.
pub fn fa_probability(alpha: f64, t: usize) -> f64 {
    1.0 - (1.0 - alpha).powf(t as f64)
}

/// Dirichlet parameters `(pi_1 N, ..., pi_K N + 1)`.
pub fn dirichlet_params(pi: &[f64], train_size: usize) -> Result<Vec<f64>> {
    if train_size == 0 {
        return Err(KqtError::InvalidParameter(
            "training size must be >= 1".into(),
        ));
    }
    validate_probs(pi)?;
    let n = train_size as f64;
    let mut a: Vec<f64> = pi.iter().map(|p| p * n).collect();
    *a.last_mut().unwrap() += 1.0;
    Ok(a)
}

/// One draw of true bin probabilities for a histogram trained on `N` points.
pub fn sample_bin_probs(pi: &[f64], train_size: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let params = dirichlet_params(pi, train_size)?;
    let gammas = params
        .iter()
        .map(|a| Gamma::new(*a, 1.0).map_err(|e| KqtError::InvalidParameter(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(draw_dirichlet(&gammas, rng))
}

fn draw_dirichlet(gammas: &[Gamma<f64>], rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut p: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 && p.iter().all(|v| *v > 0.0) {
            for v in &mut p {
                *v /= total;
            }
            return p;
        }
    }
}

/// Cumulative distribution with the last entry pinned to 1.
pub(crate) fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = p
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    *cdf.last_mut().unwrap() = 1.0;
    cdf
}

#[inline]
pub(crate) fn draw_bin(cdf: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
}

/// Smallest value whose strict exceedance fraction is at most `alpha`.
pub fn upper_quantile(values: &mut [f64], alpha: f64) -> f64 {
    let n = values.len();
    assert!(n > 0, "quantile of an empty set");
    let m = ((alpha * n as f64) + 1e-9).floor() as usize;
    let idx = n - 1 - m.min(n - 1);
    let (_, v, _) = values.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *v
}

/// Minimum number of surviving streams for a threshold to be estimated.
pub fn survivor_floor(alpha: f64) -> usize {
    (1000.0f64).max((20.0 / alpha).ceil()) as usize
}

/// Parameters of a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub target_probs: Vec<f64>,
    pub train_size: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub streams: usize,
    /// Defaults to `6 / alpha`.
    pub t_max: Option<usize>,
    pub seed: u64,
}

impl CalibrationConfig {
    pub fn new(target_probs: Vec<f64>, train_size: usize, lambda: f64, arl0: f64) -> Self {
        CalibrationConfig {
            target_probs,
            train_size,
            lambda,
            alpha: 1.0 / arl0,
            streams: 20_000,
            t_max: None,
            seed: 0,
        }
    }

    pub fn resolved_t_max(&self) -> usize {
        self.t_max
            .unwrap_or_else(|| (6.0 / self.alpha).round() as usize)
    }
}

/// Calibrated table plus the survivor count entering each estimated step.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub table: ThresholdTable,
    pub survivors: Vec<usize>,
}

struct SimStream {
    rng: Rng,
    cdf: Vec<f64>,
    state: DetectorState,
    stat: f64,
}

/// Simulates `S` synthetic streams and estimates `h_1, ..., h_{t_cut}`.
pub fn calibrate_thresholds(cfg: &CalibrationConfig) -> Result<ThresholdTable> {
    calibrate_with_survivors(cfg).map(|c| c.table)
}

pub fn calibrate_with_survivors(cfg: &CalibrationConfig) -> Result<Calibration> {
    check_alpha(cfg.alpha)?;
    check_lambda(cfg.lambda)?;
    if cfg.streams < 1000 {
        return Err(KqtError::InvalidParameter(format!(
            "need at least 1000 streams, got {}",
            cfg.streams
        )));
    }
    if cfg.alpha * (cfg.streams as f64) < 20.0 {
        return Err(KqtError::InvalidParameter(format!(
            "alpha * S = {} < 20; use more streams",
            cfg.alpha * cfg.streams as f64
        )));
    }
    let t_max = cfg.resolved_t_max();
    if t_max == 0 {
        return Err(KqtError::InvalidParameter("t_max must be >= 1".into()));
    }
    let params = dirichlet_params(&cfg.target_probs, cfg.train_size)?;
    let expected = ExpectedProbs::new(&cfg.target_probs, cfg.train_size)?;
    let gammas = params
        .iter()
        .map(|a| Gamma::new(*a, 1.0).map_err(|e| KqtError::InvalidParameter(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let floor = survivor_floor(cfg.alpha);
    if cfg.streams < floor {
        return Err(KqtError::SurvivorFloor {
            t: 1,
            survivors: cfg.streams,
            floor,
        });
    }

    let mut streams = (0..cfg.streams)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::rng(cfg.seed, "calibration", i as u64);
            let p = draw_dirichlet(&gammas, &mut rng);
            Ok(SimStream {
                rng,
                cdf: cumulative(&p),
                state: DetectorState::new(&expected, cfg.lambda)?,
                stat: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut h = Vec::new();
    let mut survivors = Vec::new();
    let mut stats = Vec::with_capacity(streams.len());
    for _t in 1..=t_max {
        if streams.len() < floor {
            break;
        }
        survivors.push(streams.len());
        streams.par_iter_mut().for_each(|s| {
            let j = draw_bin(&s.cdf, &mut s.rng);
            s.stat = s.state.step_unchecked(j);
        });
        stats.clear();
        stats.extend(streams.iter().map(|s| s.stat));
        let ht = upper_quantile(&mut stats, cfg.alpha);
        streams.retain(|s| s.stat <= ht);
        h.push(ht);
    }
    hold_plateau(&mut h);
    if h.iter().any(|v| *v <= 0.0) {
        return Err(KqtError::NoConvergence(
            "calibration produced a non-positive threshold".into(),
        ));
    }
    let table = ThresholdTable::new(
        cfg.alpha,
        cfg.lambda,
        cfg.target_probs.clone(),
        cfg.train_size,
        h,
    )?;
    Ok(Calibration { table, survivors })
}

/// Replaces the last threshold, which is held for every later time, with
/// the mean of the trailing quarter of the estimates. A single quantile at
/// the survivor floor rests on about `20` exceedances and is too noisy to
/// be reused indefinitely.
pub(crate) fn hold_plateau(h: &mut [f64]) {
    let w = h.len() / 4;
    if w < 2 {
        return;
    }
    let n = h.len();
    let mean = h[n - w..].iter().sum::<f64>() / w as f64;
    h[n - 1] = mean;
}

/// Run length of one categorical stream with bin law `p` against `table`;
/// `None` when no alarm occurs within `len` steps.
pub fn categorical_run_length(
    table: &ThresholdTable,
    p: &[f64],
    len: usize,
    rng: &mut Rng,
) -> Result<Option<usize>> {
    if p.len() != table.bins() {
        return Err(KqtError::DimensionMismatch {
            expected: table.bins(),
            got: p.len(),
        });
    }
    let expected = ExpectedProbs::new(table.target_probs(), table.train_size())?;
    let mut state = DetectorState::new(&expected, table.lambda())?;
    let cdf = cumulative(p);
    for t in 1..=len {
        let stat = state.step_unchecked(draw_bin(&cdf, rng));
        if stat > table.threshold_unchecked(t) {
            return Ok(Some(t));
        }
    }
    Ok(None)
}
