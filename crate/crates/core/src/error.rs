use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("non-finite value in {term}")]
    Numeric { term: String },
    #[error("training diverged at step {step}: {term} is not finite")]
    Divergence { step: u64, term: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! bail_arg {
    ($($t:tt)*) => {
        return Err($crate::error::Error::Argument(format!($($t)*)))
    };
}
pub(crate) use bail_arg;
