use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value detected: {0}")]
    NonFinite(String),

    #[error("{path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("malformed data format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    /// A verification run finished but did not meet its threshold.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::Dataset { .. } => "dataset",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::CheckFailed(_) => "check_failed",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
