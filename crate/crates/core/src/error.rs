use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("attribute `{attribute}`: expected {expected} values, found {actual}")]
    LengthMismatch {
        attribute: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in attribute `{attribute}` at row {row}")]
    NonFinite { attribute: String, row: usize },

    #[error("negative cluster label {label} at row {row}")]
    NegativeLabel { label: i64, row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("covariance matrix is singular even after regularization")]
    SingularCovariance,

    #[error("dimension {dim} is out of range (dataset has {m} linear dimensions)")]
    InvalidDimension { dim: usize, m: usize },

    #[error("missing {0}")]
    MissingKey(String),

    #[error("unsupported summary version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("summary payload is corrupt: {0}")]
    Corrupt(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
