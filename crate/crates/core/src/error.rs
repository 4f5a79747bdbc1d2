use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("reshape: cannot view {from} ({from_numel} elements) as {to:?}")]
    ElementCount {
        from: Shape,
        from_numel: usize,
        to: Vec<usize>,
    },

    #[error("permute: {order:?} is not a permutation of 0..{rank}")]
    InvalidPermutation { order: Vec<usize>, rank: usize },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward: non-finite gradient flowing out of `{op}`")]
    NonFiniteGrad { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0}")]
    NotScalar(Shape),

    #[error("backward: loss is not connected to any tensor that requires grad")]
    Detached,

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
