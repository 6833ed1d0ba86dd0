//! Online monitoring: bin assignment, EWMA of bin occupancies, Pearson
//! statistic and the first-crossing stopping rule.

use crate::calibration::ThresholdTable;
use crate::error::{KqtError, Result};
use crate::histogram::{Assigner, Histogram};

/// Expected bin frequencies of a histogram trained on `N` points:
/// `N pi_j / (N + 1)` for bounded bins, `(N pi_K + 1) / (N + 1)` for the
/// residual bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedProbs(Vec<f64>);

impl ExpectedProbs {
    pub fn new(pi: &[f64], train_size: usize) -> Result<Self> {
        if train_size == 0 {
            return Err(KqtError::InvalidParameter(
                "training size must be >= 1".into(),
            ));
        }
        if pi.len() < 2 {
            return Err(KqtError::InvalidParameter("need at least two bins".into()));
        }
        let n = train_size as f64;
        let k = pi.len();
        let v = pi
            .iter()
            .enumerate()
            .map(|(j, p)| {
                if j + 1 < k {
                    n * p / (n + 1.0)
                } else {
                    (n * p + 1.0) / (n + 1.0)
                }
            })
            .collect();
        Ok(ExpectedProbs(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `sum_j (Z_j - pihat_j)^2 / pihat_j`.
pub fn pearson_stat(z: &[f64], expected: &[f64]) -> Result<f64> {
    if z.len() != expected.len() {
        return Err(KqtError::DimensionMismatch {
            expected: expected.len(),
            got: z.len(),
        });
    }
    if expected.iter().any(|p| *p <= 0.0) {
        return Err(KqtError::InvalidParameter(
            "expected probabilities must be > 0".into(),
        ));
    }
    Ok(pearson_unchecked(z, expected))
}

#[inline]
fn pearson_unchecked(z: &[f64], expected: &[f64]) -> f64 {
    z.iter()
        .zip(expected)
        .map(|(z, p)| (z - p) * (z - p) / p)
        .sum()
}

/// EWMA state of one monitored stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    z: Vec<f64>,
    expected: Vec<f64>,
    lambda: f64,
    t: usize,
    last_stat: f64,
    alarmed: bool,
}

impl DetectorState {
    /// Fresh state with `Z_0 = pihat`.
    pub fn new(expected: &ExpectedProbs, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(KqtError::InvalidParameter(format!(
                "forgetting factor must lie in [0, 1], got {lambda}"
            )));
        }
        if expected.as_slice().iter().any(|p| *p <= 0.0) {
            return Err(KqtError::InvalidParameter(
                "expected probabilities must be > 0".into(),
            ));
        }
        Ok(DetectorState {
            z: expected.as_slice().to_vec(),
            expected: expected.as_slice().to_vec(),
            lambda,
            t: 0,
            last_stat: 0.0,
            alarmed: false,
        })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn last_stat(&self) -> f64 {
        self.last_stat
    }

    pub fn alarmed(&self) -> bool {
        self.alarmed
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Folds in one observation in bin `j` and returns the new statistic.
    pub fn ewma_step(&mut self, j: usize) -> Result<f64> {
        if self.alarmed {
            return Err(KqtError::InvalidParameter(
                "detector already raised an alarm".into(),
            ));
        }
        if j >= self.z.len() {
            return Err(KqtError::InvalidBinIndex {
                index: j,
                bins: self.z.len(),
            });
        }
        Ok(self.step_unchecked(j))
    }

    #[inline]
    pub(crate) fn step_unchecked(&mut self, j: usize) -> f64 {
        let keep = 1.0 - self.lambda;
        for z in &mut self.z {
            *z *= keep;
        }
        self.z[j] += self.lambda;
        self.t += 1;
        self.last_stat = pearson_unchecked(&self.z, &self.expected);
        self.last_stat
    }

    pub(crate) fn mark_alarm(&mut self) {
        self.alarmed = true;
    }
}

/// Outcome of monitoring one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorOutcome {
    pub detected: bool,
    /// First `t` (1-based) with `T_t > h_t`.
    pub detection_time: Option<usize>,
    pub samples_processed: usize,
    /// Statistic trace, when requested (at most the configured length).
    pub trace: Option<Vec<f64>>,
}

/// Streaming detector pairing a histogram with a threshold table.
pub struct Detector<'a> {
    assigner: Assigner<'a>,
    table: &'a ThresholdTable,
    state: DetectorState,
    trace: Option<(usize, Vec<f64>)>,
}

impl<'a> Detector<'a> {
    pub fn new(hist: &'a Histogram, table: &'a ThresholdTable) -> Result<Self> {
        table.check_compatible(hist)?;
        let expected = ExpectedProbs::new(hist.target_probs(), hist.train_size())?;
        Ok(Detector {
            assigner: hist.assigner(),
            table,
            state: DetectorState::new(&expected, table.lambda())?,
            trace: None,
        })
    }

    /// Keeps the first `cap` statistics for diagnostics.
    pub fn with_trace(mut self, cap: usize) -> Self {
        self.trace = Some((cap, Vec::with_capacity(cap.min(1 << 16))));
        self
    }

    pub fn state(&self) -> &DetectorState {
        &self.state
    }

    /// Processes one sample; returns the detection time on the first alarm.
    pub fn push(&mut self, x: &[f64]) -> Result<Option<usize>> {
        let j = self.assigner.assign(x)?;
        let stat = self.state.ewma_step(j)?;
        if let Some((cap, buf)) = &mut self.trace {
            if buf.len() < *cap {
                buf.push(stat);
            }
        }
        let t = self.state.t();
        if stat > self.table.threshold_unchecked(t) {
            self.state.mark_alarm();
            return Ok(Some(t));
        }
        Ok(None)
    }

    fn finish(self, detection_time: Option<usize>) -> MonitorOutcome {
        MonitorOutcome {
            detected: detection_time.is_some(),
            detection_time,
            samples_processed: self.state.t(),
            trace: self.trace.map(|(_, b)| b),
        }
    }
}

/// Runs the detector over `samples` until the first alarm or the end.
pub fn monitor_stream<I, P>(
    hist: &Histogram,
    table: &ThresholdTable,
    samples: I,
    trace: Option<usize>,
) -> Result<MonitorOutcome>
where
    I: IntoIterator<Item = P>,
    P: AsRef<[f64]>,
{
    let mut det = Detector::new(hist, table)?;
    if let Some(cap) = trace {
        det = det.with_trace(cap);
    }
    for x in samples {
        if let Some(t) = det.push(x.as_ref())? {
            return Ok(det.finish(Some(t)));
        }
    }
    Ok(det.finish(None))
}
