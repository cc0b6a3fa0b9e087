//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of operands do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A constructor or operation received an invalid setting
    /// (bit width, stride, padding, precision ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A scalar argument is outside its domain (e.g. clip bounds, step size).
    #[error("argument error: {0}")]
    Argument(String),

    /// Input data is unusable (empty tensor, label out of range ...).
    #[error("data error: {0}")]
    Data(String),

    /// The autodiff tape or a parameter was used out of order.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("export error: {0}")]
    Export(String),

    /// Training produced a non-finite gradient or loss.
    #[error("numerical error: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
