//! Kernel-QuantTree histograms with an EWMA change detector for
//! multivariate streams.

pub mod bench;
pub mod builder;
pub mod calibration;
pub mod data;
pub mod error;
pub mod gmm;
pub mod histogram;
pub mod kernel;
pub mod linalg;
pub mod monitor;
pub mod rng;
pub mod synthetic;

pub use builder::{build_histogram, BuildConfig};
pub use calibration::{calibrate_thresholds, fa_probability, CalibrationConfig, ThresholdTable};
pub use data::Dataset;
pub use error::{ErrorClass, KqtError, Result};
pub use histogram::{Bin, Histogram};
pub use kernel::{KernelKind, MetricContext};
pub use monitor::{monitor_stream, Detector, DetectorState, ExpectedProbs, MonitorOutcome};
