use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index ({n}, {h}, {w}) out of range for tensor of shape {shape:?}")]
    IndexOutOfRange {
        n: usize,
        h: usize,
        w: usize,
        shape: [usize; 4],
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("log-sum-exp of an empty vector")]
    EmptyInput,

    #[error("invalid control signal: {0}")]
    InvalidControl(String),

    #[error("layer {index} ({token}): {reason}")]
    Config {
        index: usize,
        token: String,
        reason: String,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical abort at step {step}, layer {layer}: {reason}")]
    Numerical {
        step: usize,
        layer: usize,
        reason: String,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("data file {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
