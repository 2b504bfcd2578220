//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Input data violates a documented invariant.
    #[error("invalid data: {0}")]
    Data(String),

    #[error("payload size mismatch for {file}: expected {expected} bytes, found {found}")]
    PayloadSize {
        file: String,
        expected: u64,
        found: u64,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Raised when a caption admits no permutation that changes it.
    #[error("no valid negative: {0}")]
    NoValidNegative(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }

    /// Short stable identifier, printed as the first field of CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Data(_) => "data",
            Error::PayloadSize { .. } => "payload_size",
            Error::EmptyDataset => "empty_dataset",
            Error::Shape(_) => "shape",
            Error::NoValidNegative(_) => "no_valid_negative",
            Error::Numerical(_) => "numerical",
            Error::Usage(_) => "usage",
        }
    }
}
