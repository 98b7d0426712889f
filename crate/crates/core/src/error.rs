use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or parameter value violates its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Header bytes (magic, version, flags) could not be parsed.
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A loss, gradient or parameter became NaN or infinite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 configuration, 2 input/output, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Insufficient(_) => 1,
            Error::Io { .. }
            | Error::MalformedHeader(_)
            | Error::Truncated(_)
            | Error::Format(_)
            | Error::DimensionMismatch { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}
