//! Repeated monitoring experiments: empirical ARL0, detection delay and
//! false-alarm rate.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::builder::{build_histogram, BuildConfig};
use crate::calibration::{self, CalibrationConfig, ThresholdTable};
use crate::error::{KqtError, Result};
use crate::histogram::{uniform_probs, Histogram};
use crate::kernel::KernelKind;
use crate::monitor::Detector;
use crate::rng;
use crate::synthetic::{self, ChangeSpec, GaussianSpec, Source};

/// Distribution family of the stationary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DataFamily {
    /// Zero-mean Gaussian with a random covariance per training draw.
    Gaussian,
    /// Equal-weight mixture with random means (scaled by `spread`) and
    /// covariances per training draw.
    Mixture {
        modes: usize,
        spread: f64,
    },
    Uniform,
    Exponential,
}

/// One benchmark configuration. Stream length defaults to `6 * ARL0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub detector: String,
    pub kernel: KernelKind,
    #[serde(rename = "K")]
    pub bins: usize,
    pub lambda: f64,
    #[serde(rename = "N")]
    pub train_size: usize,
    #[serde(rename = "V")]
    pub candidates: usize,
    pub jitter: bool,
    pub arl0: Vec<f64>,
    pub streams: usize,
    pub tau: usize,
    pub length: Option<usize>,
    /// Number of independent training sets (one histogram each); streams
    /// are split evenly among them. Defaults to one per stream.
    pub training_draws: Option<usize>,
    /// Calibration stream count; defaults to `max(20000, 2 * floor)`.
    pub calibration_streams: Option<usize>,
    pub dim: usize,
    pub data: DataFamily,
    /// Symmetric KL divergence of the change at `tau`; 0 disables it.
    pub skl: f64,
    /// Also run stationary streams to estimate ARL0 in compare runs.
    pub measure_arl0: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            detector: "kqt-ewma".into(),
            kernel: KernelKind::Mahalanobis,
            bins: 32,
            lambda: 0.05,
            train_size: 4096,
            candidates: 250,
            jitter: false,
            arl0: vec![500.0],
            streams: 2000,
            tau: 300,
            length: None,
            training_draws: None,
            calibration_streams: None,
            dim: 4,
            data: DataFamily::Gaussian,
            skl: 1.0,
            measure_arl0: false,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.streams == 0 {
            return Err(KqtError::InvalidParameter(
                "need at least one stream".into(),
            ));
        }
        if self.dim == 0 {
            return Err(KqtError::InvalidParameter("dimension must be >= 1".into()));
        }
        if self.arl0.iter().any(|a| a.is_nan() || *a <= 1.0) {
            return Err(KqtError::InvalidParameter(
                "ARL0 targets must exceed 1".into(),
            ));
        }
        if self.training_draws == Some(0) {
            return Err(KqtError::InvalidParameter(
                "training_draws must be >= 1".into(),
            ));
        }
        if !(self.skl.is_finite() && self.skl >= 0.0) {
            return Err(KqtError::InvalidParameter(
                "skl must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn stream_length(&self, arl0: f64) -> usize {
        self.length.unwrap_or((6.0 * arl0).round() as usize)
    }

    pub fn draws(&self) -> usize {
        self.training_draws
            .unwrap_or(self.streams)
            .min(self.streams)
    }

    pub fn calibration_config(&self, arl0: f64) -> CalibrationConfig {
        let mut c =
            CalibrationConfig::new(uniform_probs(self.bins), self.train_size, self.lambda, arl0);
        let floor = calibration::survivor_floor(c.alpha);
        c.streams = self
            .calibration_streams
            .unwrap_or_else(|| 20_000.max(2 * floor));
        c.seed = rng::derive(self.seed, "calibration", arl0.to_bits());
        c
    }

    fn build_config(&self, draw: usize) -> BuildConfig {
        BuildConfig {
            bins: self.bins,
            target_probs: None,
            candidates: self.candidates,
            kernel: self.kernel,
            seed: rng::derive(self.seed, "build", draw as u64),
            jitter: self.jitter,
        }
    }

    /// Pre-change distribution of a training draw. Depends only on the
    /// master seed, the family and the dimension, so detectors sharing a
    /// seed see the same data.
    pub fn source(&self, draw: usize) -> Result<Source> {
        let mut r = rng::rng(self.seed, "phi0", draw as u64);
        Ok(match &self.data {
            DataFamily::Gaussian => Source::Gaussian(GaussianSpec::random(self.dim, &mut r)?),
            DataFamily::Mixture { modes, spread } => Source::Mixture(synthetic::random_mixture(
                self.dim, *modes, *spread, &mut r,
            )?),
            DataFamily::Uniform => Source::Uniform { dim: self.dim },
            DataFamily::Exponential => Source::Exponential { dim: self.dim },
        })
    }
}

/// Outcome of one monitored stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub draw: usize,
    pub t_star: Option<usize>,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    FalseAlarm,
    Detected { delay: usize },
    Censored,
}

impl StreamRecord {
    /// Alarms before `tau` are false; `t* = tau` counts as zero delay.
    pub fn classify(&self, tau: usize) -> Outcome {
        match self.t_star {
            Some(t) if t < tau => Outcome::FalseAlarm,
            Some(t) => Outcome::Detected { delay: t - tau },
            None => Outcome::Censored,
        }
    }
}

/// Runs one stream per record slot. The change applies to samples at
/// 1-based positions `t >= tau`.
pub fn run_streams(
    cfg: &BenchConfig,
    table: &ThresholdTable,
    length: usize,
    with_change: bool,
) -> Result<Vec<StreamRecord>> {
    cfg.validate()?;
    let draws = cfg.draws();
    let per_draw: Vec<std::ops::Range<usize>> = (0..draws)
        .map(|g| (g * cfg.streams / draws)..((g + 1) * cfg.streams / draws))
        .collect();
    let nested = per_draw
        .into_par_iter()
        .enumerate()
        .map(|(g, range)| {
            let source = cfg.source(g)?;
            let train = source.sample(cfg.train_size, &mut rng::rng(cfg.seed, "train", g as u64));
            let hist = build_histogram(&train, &cfg.build_config(g))?;
            let moments = if with_change && cfg.skl > 0.0 {
                Some(source.moment_gaussian()?)
            } else {
                None
            };
            let sampler = source.sampler();
            range
                .map(|i| {
                    let change = match &moments {
                        Some(m) => Some(synthetic::make_change(
                            m,
                            cfg.skl,
                            &mut rng::rng(cfg.seed, "change", i as u64),
                        )?),
                        None => None,
                    };
                    let mut r = rng::rng(cfg.seed, "stream", i as u64);
                    let t_star = run_one(
                        &hist,
                        table,
                        &sampler,
                        change.as_ref(),
                        cfg.tau,
                        length,
                        &mut r,
                    )?;
                    Ok(StreamRecord {
                        draw: g,
                        t_star,
                        length,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn run_one(
    hist: &Histogram,
    table: &ThresholdTable,
    sampler: &synthetic::Sampler,
    change: Option<&ChangeSpec>,
    tau: usize,
    length: usize,
    rng: &mut rng::Rng,
) -> Result<Option<usize>> {
    let mut det = Detector::new(hist, table)?;
    let mut x = vec![0.0; sampler.dim()];
    for t in 1..=length {
        sampler.draw(rng, &mut x);
        if let Some(c) = change {
            if t >= tau {
                c.apply_in_place(&mut x);
            }
        }
        if let Some(t_star) = det.push(&x)? {
            return Ok(Some(t_star));
        }
    }
    Ok(None)
}

/// Mean run length over stationary streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arl0Estimate {
    /// Censored streams contribute their full length.
    pub mean: f64,
    pub std_dev: f64,
    pub ci95: (f64, f64),
    pub censored: usize,
    pub streams: usize,
    pub records: Vec<StreamRecord>,
}

impl Arl0Estimate {
    pub fn from_records(records: Vec<StreamRecord>) -> Self {
        let n = records.len() as f64;
        let vals: Vec<f64> = records
            .iter()
            .map(|r| r.t_star.unwrap_or(r.length) as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = if records.len() > 1 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let se = (var / n).sqrt();
        Arl0Estimate {
            mean,
            std_dev: var.sqrt(),
            ci95: (mean - 1.96 * se, mean + 1.96 * se),
            censored: records.iter().filter(|r| r.t_star.is_none()).count(),
            streams: records.len(),
            records,
        }
    }

    /// Censored streams as a fraction of all streams.
    pub fn censored_frac(&self) -> f64 {
        self.censored as f64 / self.streams as f64
    }
}

/// Stationary streams of length `6 * ARL0` (or `cfg.length`) monitored with
/// `table`; every stream gets the histogram of its training draw.
pub fn empirical_arl0(cfg: &BenchConfig, table: &ThresholdTable) -> Result<Arl0Estimate> {
    let length = cfg.stream_length(table.arl0());
    Ok(Arl0Estimate::from_records(run_streams(
        cfg, table, length, false,
    )?))
}

/// Per-stream outcomes and aggregates of a change-detection experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub tau: usize,
    pub records: Vec<StreamRecord>,
    pub false_alarms: usize,
    pub detected: usize,
    pub censored: usize,
    pub fa_rate: f64,
    /// Mean of `t* - tau` over detected streams; `None` if none detected.
    pub mean_delay: Option<f64>,
    pub censored_frac: f64,
}

impl BenchReport {
    pub fn from_records(tau: usize, records: Vec<StreamRecord>) -> Self {
        let mut false_alarms = 0;
        let mut censored = 0;
        let mut delays = Vec::new();
        for r in &records {
            match r.classify(tau) {
                Outcome::FalseAlarm => false_alarms += 1,
                Outcome::Censored => censored += 1,
                Outcome::Detected { delay } => delays.push(delay as f64),
            }
        }
        let n = records.len() as f64;
        BenchReport {
            tau,
            false_alarms,
            detected: delays.len(),
            censored,
            fa_rate: false_alarms as f64 / n,
            mean_delay: if delays.is_empty() {
                None
            } else {
                Some(delays.iter().sum::<f64>() / delays.len() as f64)
            },
            censored_frac: censored as f64 / n,
            records,
        }
    }

    /// Delay of stream `i`, if it was detected after the change.
    pub fn delay(&self, i: usize) -> Option<usize> {
        match self.records[i].classify(self.tau) {
            Outcome::Detected { delay } => Some(delay),
            _ => None,
        }
    }
}

/// Streams with a change at `tau` of magnitude `cfg.skl`.
pub fn detection_bench(cfg: &BenchConfig, table: &ThresholdTable) -> Result<BenchReport> {
    let length = cfg.stream_length(table.arl0());
    if cfg.tau == 0 || cfg.tau >= length {
        return Err(KqtError::InvalidParameter(format!(
            "tau = {} must lie in 1..{length}",
            cfg.tau
        )));
    }
    Ok(BenchReport::from_records(
        cfg.tau,
        run_streams(cfg, table, length, true)?,
    ))
}

/// One row of a comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub detector: String,
    pub kernel: String,
    #[serde(rename = "K")]
    pub bins: usize,
    pub lambda: f64,
    #[serde(rename = "N")]
    pub train_size: usize,
    pub arl0_target: f64,
    pub arl0_emp: Option<f64>,
    pub fa_rate: f64,
    pub mean_delay: Option<f64>,
    pub censored_frac: f64,
    pub streams: usize,
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "detector",
    "kernel",
    "K",
    "lambda",
    "N",
    "arl0_target",
    "arl0_emp",
    "fa_rate",
    "mean_delay",
    "censored_frac",
    "streams",
];

type TableKey = (usize, usize, u64, u64, u64, Option<usize>);

/// Runs every configuration at every target ARL0. Thresholds are calibrated
/// once per distinct `(K, N, lambda, ARL0, seed)` and shared.
pub fn compare_detectors(cfgs: &[BenchConfig]) -> Result<Vec<ReportRow>> {
    let mut tables: HashMap<TableKey, ThresholdTable> = HashMap::new();
    let mut rows = Vec::new();
    for cfg in cfgs {
        cfg.validate()?;
        for &arl0 in &cfg.arl0 {
            let key = (
                cfg.bins,
                cfg.train_size,
                cfg.lambda.to_bits(),
                arl0.to_bits(),
                cfg.seed,
                cfg.calibration_streams,
            );
            let table = match tables.entry(key) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(e) => e.insert(calibration::calibrate_thresholds(
                    &cfg.calibration_config(arl0),
                )?),
            };
            let table = &*table;
            let report = detection_bench(cfg, table)?;
            let arl0_emp = if cfg.measure_arl0 {
                Some(empirical_arl0(cfg, table)?.mean)
            } else {
                None
            };
            rows.push(ReportRow {
                detector: cfg.detector.clone(),
                kernel: cfg.kernel.name().into(),
                bins: cfg.bins,
                lambda: cfg.lambda,
                train_size: cfg.train_size,
                arl0_target: arl0,
                arl0_emp,
                fa_rate: report.fa_rate,
                mean_delay: report.mean_delay,
                censored_frac: report.censored_frac,
                streams: cfg.streams,
            });
        }
    }
    Ok(rows)
}

/// Paired comparison of delays over streams detected by both reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedDelay {
    pub pairs: usize,
    /// Mean of `delay_a - delay_b`.
    pub mean_diff: f64,
    pub std_err: f64,
    pub z: f64,
}

pub fn paired_delay(a: &BenchReport, b: &BenchReport) -> Result<PairedDelay> {
    if a.records.len() != b.records.len() || a.tau != b.tau {
        return Err(KqtError::InvalidParameter(
            "paired comparison needs reports over the same streams".into(),
        ));
    }
    let diffs: Vec<f64> = (0..a.records.len())
        .filter_map(|i| Some(a.delay(i)? as f64 - b.delay(i)? as f64))
        .collect();
    let n = diffs.len() as f64;
    if diffs.len() < 2 {
        return Err(KqtError::InvalidParameter(
            "fewer than two paired streams".into(),
        ));
    }
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    Ok(PairedDelay {
        pairs: diffs.len(),
        mean_diff: mean,
        std_err: se,
        z: if se > 0.0 { mean / se } else { f64::NAN },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> BenchConfig {
        BenchConfig {
            train_size: 256,
            bins: 8,
            candidates: 10,
            streams: 40,
            training_draws: Some(4),
            tau: 50,
            length: Some(300),
            dim: 2,
            seed: 9,
            ..BenchConfig::default()
        }
    }

    fn infinite_table(cfg: &BenchConfig) -> ThresholdTable {
        ThresholdTable::new(
            0.01,
            cfg.lambda,
            uniform_probs(cfg.bins),
            cfg.train_size,
            vec![f64::INFINITY],
        )
        .unwrap()
    }

    #[test]
    fn unreachable_thresholds_censor_everything() {
        let cfg = quick_cfg();
        let est = empirical_arl0(&cfg, &infinite_table(&cfg)).unwrap();
        assert_eq!(est.censored, cfg.streams);
        assert_eq!(est.mean, 300.0);
        let rep = detection_bench(&cfg, &infinite_table(&cfg)).unwrap();
        assert_eq!(rep.censored_frac, 1.0);
        assert_eq!(rep.mean_delay, None);
    }

    #[test]
    fn classification_boundaries() {
        let r = |t| StreamRecord {
            draw: 0,
            t_star: t,
            length: 900,
        };
        assert_eq!(r(Some(299)).classify(300), Outcome::FalseAlarm);
        assert_eq!(r(Some(300)).classify(300), Outcome::Detected { delay: 0 });
        assert_eq!(r(Some(310)).classify(300), Outcome::Detected { delay: 10 });
        assert_eq!(r(None).classify(300), Outcome::Censored);
    }

    #[test]
    fn aggregates_match_records() {
        let recs = vec![
            StreamRecord {
                draw: 0,
                t_star: Some(10),
                length: 100,
            },
            StreamRecord {
                draw: 0,
                t_star: Some(60),
                length: 100,
            },
            StreamRecord {
                draw: 1,
                t_star: Some(54),
                length: 100,
            },
            StreamRecord {
                draw: 1,
                t_star: None,
                length: 100,
            },
        ];
        let rep = BenchReport::from_records(50, recs);
        assert_eq!(rep.false_alarms, 1);
        assert_eq!(rep.detected, 2);
        assert_eq!(rep.fa_rate, 0.25);
        assert_eq!(rep.mean_delay, Some(7.0));
        assert_eq!(rep.censored_frac, 0.25);
        assert_eq!(BenchReport::from_records(50, rep.records.clone()), rep);
    }

    #[test]
    fn reruns_are_identical() {
        let cfg = quick_cfg();
        let table = ThresholdTable::new(
            0.01,
            cfg.lambda,
            uniform_probs(cfg.bins),
            cfg.train_size,
            vec![0.3],
        )
        .unwrap();
        let a = detection_bench(&cfg, &table).unwrap();
        let b = detection_bench(&cfg, &table).unwrap();
        assert_eq!(a, b);
        assert!(a.detected > 0);
    }

    #[test]
    fn enormous_change_is_caught_quickly() {
        let cfg = BenchConfig {
            skl: 1e6,
            streams: 200,
            training_draws: Some(4),
            ..quick_cfg()
        };
        let mut cal =
            CalibrationConfig::new(uniform_probs(cfg.bins), cfg.train_size, cfg.lambda, 50.0);
        cal.streams = 2000;
        cal.seed = 1;
        let table = calibration::calibrate_thresholds(&cal).unwrap();
        let rep = detection_bench(&cfg, &table).unwrap();
        assert_eq!(rep.censored, 0);
        assert!(rep.detected > 0);
        for i in 0..rep.records.len() {
            if let Some(delay) = rep.delay(i) {
                assert!(delay <= 10, "stream {i}: delay {delay}");
            }
        }
    }

    #[test]
    fn mismatched_table_is_refused() {
        let cfg = quick_cfg();
        let bad = ThresholdTable::new(
            0.01,
            cfg.lambda,
            uniform_probs(4),
            cfg.train_size,
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(
            empirical_arl0(&cfg, &bad),
            Err(KqtError::Compatibility(_))
        ));
    }

    #[test]
    fn config_json_uses_defaults() {
        let cfg: BenchConfig =
            serde_json::from_str(r#"{"kernel": {"kind": "axis"}, "N": 1024}"#).unwrap();
        assert_eq!(cfg.kernel, KernelKind::AxisAligned);
        assert_eq!(cfg.train_size, 1024);
        assert_eq!(cfg.bins, 32);
        assert_eq!(cfg.stream_length(500.0), 3000);
        assert_eq!(cfg.calibration_config(1000.0).streams, 40_000);
        assert_eq!(cfg.calibration_config(500.0).streams, 20_000);
    }
}
