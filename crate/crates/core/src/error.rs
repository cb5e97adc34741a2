use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid shape {0:?}: extents must be non-empty and positive")]
    InvalidShape(Vec<usize>),

    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("empty factor list")]
    EmptyFactors,

    #[error("non-finite value in input")]
    NonFinite,

    #[error("matrix is rank deficient (sigma_min = {sigma_min:e}, tolerance = {tolerance:e})")]
    RankDeficient { sigma_min: f64, tolerance: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("activation cache does not match the current model parameters")]
    StaleCache,

    #[error("input value {value} outside range [{lo}, {hi}]")]
    InputOutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("IDX format error in {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
