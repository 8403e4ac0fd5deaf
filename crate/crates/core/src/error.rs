use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OdexError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OdexError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("probability {value} at pixel {index} is outside the open interval (0, 1)")]
    ProbabilityDomain { index: usize, value: f64 },

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: &'static str },

    #[error("batch of size {0} is too small for batch statistics (need at least 2)")]
    BatchTooSmall(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("negative distance {0} in calibration data")]
    NegativeDistance(f64),

    #[error("covariance is singular even after regularization")]
    Singular,

    #[error("model pool is empty")]
    EmptyPool,

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("invalid stage schedule: {0}")]
    InvalidSchedule(String),

    #[error("{path}: bad magic bytes (expected {expected:?})")]
    CorruptMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: format version {found} is not supported (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: file is truncated")]
    Truncated { path: PathBuf },

    #[error("{path}: {message}")]
    CorruptCheckpoint { path: PathBuf, message: String },

    #[error("no results found in {0}")]
    MissingResults(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
