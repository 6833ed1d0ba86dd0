use thiserror::Error;

/// Everything that can go wrong while building, calibrating or monitoring.
#[derive(Debug, Error)]
pub enum KqtError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric positive-definite: {0}")]
    NotPositiveDefinite(String),

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("EM degenerate: {0}")]
    EmDegenerate(String),

    #[error("bin index {index} out of range for {bins} bins")]
    InvalidBinIndex { index: usize, bins: usize },

    #[error("tied values at a split boundary{}; enable jitter to break them", bin.map(|b| format!(" (bin {b})")).unwrap_or_default())]
    TiesDetected { bin: Option<usize> },

    #[error("non-finite value at point {point}, coordinate {coord}")]
    NonFinite { point: usize, coord: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("incompatible artifacts: {0}")]
    Compatibility(String),

    #[error("survivor floor {floor} reached at t = {t} (only {survivors} streams left)")]
    SurvivorFloor {
        t: usize,
        survivors: usize,
        floor: usize,
    },

    #[error("root search did not converge: {0}")]
    NoConvergence(String),

    #[error("unsupported artifact version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid artifact: {0}")]
    InvalidArtifact(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Broad failure classes, used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input data or incompatible artifacts.
    Data,
    /// Numerical breakdown or calibration failure.
    Numeric,
}

impl KqtError {
    pub fn class(&self) -> ErrorClass {
        match self {
            KqtError::NotPositiveDefinite(_)
            | KqtError::EmDegenerate(_)
            | KqtError::SurvivorFloor { .. }
            | KqtError::NoConvergence(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = KqtError> = std::result::Result<T, E>;
