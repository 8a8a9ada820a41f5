use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HitError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HitError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("input domain error: {0}")]
    InputDomain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HitError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        HitError::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HitError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HitError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
