use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk data (bad magic, truncated payload, bad header).
    #[error("format error: {0}")]
    Format(String),

    /// A domain invariant does not hold; `field` names the offending field.
    #[error("invalid {field}: {message}")]
    Validation { field: &'static str, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    /// A recipe registry or parameter table could not be read.
    #[error("config: {0}")]
    Config(String),

    /// A replicate check did not hold.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            field,
            message: message.into(),
        }
    }

    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
