use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum FcddError {
    /// Invalid architecture, hyperparameter or geometry.
    #[error("configuration error: {0}")]
    Config(String),
    /// The caller used an API in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// NaN/Inf produced or consumed.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A dataset, checkpoint or image could not be parsed.
    #[error("load error: {0}")]
    Load(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FcddError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FcddError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FcddError>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::FcddError::Config(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::FcddError::Usage(format!($($arg)*)) };
}
macro_rules! numeric_err {
    ($($arg:tt)*) => { $crate::error::FcddError::Numeric(format!($($arg)*)) };
}
macro_rules! load_err {
    ($($arg:tt)*) => { $crate::error::FcddError::Load(format!($($arg)*)) };
}
pub(crate) use {config_err, load_err, numeric_err, usage_err};
