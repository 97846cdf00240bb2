use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shapes {lhs:?} and {rhs:?} cannot be broadcast together")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm in training mode needs more than one value per channel")]
    ZeroVariance,

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("network `{0}` must be frozen for this use")]
    NotFrozen(String),

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("{0} loss is not finite")]
    NonFiniteLoss(&'static str),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed image file {path}: {reason}")]
    ImageFormat { path: PathBuf, reason: String },

    #[error("malformed dataset manifest: {0}")]
    Manifest(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
