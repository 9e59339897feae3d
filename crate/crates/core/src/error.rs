use crate::tensor::OpKind;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: OpKind, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph was consumed by a previous backward pass")]
    GraphFreed,

    #[error("invalid name pattern `{pattern}`: {reason}")]
    Pattern { pattern: String, reason: String },

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    #[error("nothing to train: {0}")]
    NothingToTrain(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: OpKind, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
