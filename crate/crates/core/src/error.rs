//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two objects whose shapes must conform do not.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid configuration or argument value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An operation that requires a mutable tracker was called on a frozen one,
    /// or a read that requires updates was called before any.
    #[error("tracker state error: {0}")]
    TrackerState(String),

    /// Training aborted because the loss or a gradient diverged.
    #[error("training diverged at epoch {epoch}, iteration {iteration}: {detail}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    /// File could not be parsed (corrupt header, truncation, bad field).
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: &std::path::Path, detail: impl ToString) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            detail: detail.to_string(),
        }
    }
}
