use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FairError {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("grid mismatch between {left} and {right}: {detail}")]
    GridMismatch { left: String, right: String, detail: String },
    #[error("horizon mismatch between {left} ({left_t} steps) and {right} ({right_t} steps)")]
    HorizonMismatch {
        left: String,
        right: String,
        left_t: usize,
        right_t: usize,
    },
    #[error("series too short: {len} steps, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("group {0} has no cells")]
    EmptyGroup(&'static str),
    #[error("zero population mass in {0}")]
    ZeroMass(&'static str),
    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),
    #[error("non-positive standard deviation {0}")]
    NonPositiveSigma(f64),
    #[error("missing ground truth")]
    MissingGroundTruth,
    #[error("missing scale record for channel {0}")]
    MissingScaleRecord(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("corrupt container {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl FairError {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        FairError::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FairError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from user input validation rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            FairError::Invalid { .. }
                | FairError::GridMismatch { .. }
                | FairError::HorizonMismatch { .. }
                | FairError::SeriesTooShort { .. }
                | FairError::Shape { .. }
                | FairError::Csv { .. }
                | FairError::Json { .. }
                | FairError::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, FairError>;
