use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    ModelSpec(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("unknown segment tag `{0}`")]
    UnknownSegment(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} is allocated to a device but has no samples")]
    EmptyLabel { label: usize },

    #[error("device {device} has an empty {split} set")]
    EmptyShard { device: usize, split: &'static str },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("IID thresholds are only calibrated for 7 or 10 classes, got {0}")]
    UnsupportedClassCount(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
