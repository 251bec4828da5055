use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DgmError>;

#[derive(Debug, Error)]
pub enum DgmError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} is not a differentiable input of this graph")]
    NotDifferentiable(usize),

    #[error("index out of range: {what} = {value}, allowed {lo}..={hi}")]
    OutOfRange {
        what: &'static str,
        value: usize,
        lo: usize,
        hi: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("mask monotonicity violated at entry {0}")]
    NotMonotone(usize),

    #[error("unknown task {0}")]
    UnknownTask(usize),

    #[error("label {label} does not belong to {context}")]
    UnknownLabel { label: usize, context: String },

    #[error("malformed IDX file {path}: {reason} at byte offset {offset}")]
    Idx {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl DgmError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        DgmError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DgmError::Invalid(msg.into())
    }
}
