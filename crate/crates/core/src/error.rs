use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("finite-difference check: function is not finite at the probe point")]
    NonFinite,

    #[error("parameter {name:?} has no gradient")]
    MissingGrad { name: String },

    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },

    #[error("parameter count {actual} is outside ±15% of the target {target}")]
    ParamCount { actual: usize, target: usize },

    #[error("no prunable tensors in the registry")]
    NothingToPrune,

    #[error("{path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("invalid run configuration: {0}")]
    Config(String),

    #[error("non-finite loss in phase {phase} at step {step}")]
    Diverged { phase: &'static str, step: usize },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
