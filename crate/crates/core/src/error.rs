use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    ZeroDimension(Shape),

    #[error("data length {len} does not match shape {shape:?} ({expected} elements)")]
    DataLength { shape: Shape, len: usize, expected: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Shape, right: Shape },

    #[error("shape {stat:?} does not broadcast against {target:?}")]
    NotBroadcastable { stat: Shape, target: Shape },

    #[error("group count {groups} does not divide channel count {channels}")]
    GroupCount { groups: usize, channels: usize },

    #[error("division by zero at element {index}")]
    DivisionByZero { index: usize },

    #[error("non-finite value at element {index} of {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("{what}: need at least 2 elements per statistic, got {count}")]
    TooFewElements { what: &'static str, count: usize },

    #[error("parameter length {got} does not match channel count {expected} ({what})")]
    ParamLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("running statistics are uninitialized; run a train-mode forward or seed them first")]
    UninitializedStats,

    #[error("backward requires a train-mode cache")]
    EvalCache,

    #[error("backward cache belongs to {cached}, not {expected}")]
    CacheKind {
        cached: &'static str,
        expected: &'static str,
    },

    #[error("negative batch variance {value} at channel {channel}")]
    NegativeVariance { channel: usize, value: f64 },

    #[error("invalid value for {name}: {reason}")]
    InvalidValue { name: String, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("CIFAR-10 format error: {0}")]
    CifarFormat(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error comes from the filesystem rather than from the
    /// inputs themselves.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Csv(_))
    }
}
