use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants follow the failure classes the library distinguishes: shape
/// problems, values outside a mathematical domain, violated call contracts,
/// configuration mistakes, and I/O or format problems on persisted artifacts.
#[derive(Debug, Error)]
pub enum MastError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },

    #[error("{context} ({path}): {source}")]
    Io {
        context: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at step {step}: non-finite loss; last breakdown {breakdown}")]
    Diverged { step: usize, breakdown: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MastError> = std::result::Result<T, E>;

impl MastError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        MastError::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        MastError::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        MastError::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MastError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: &'static str, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MastError::Io {
            context,
            path: path.into(),
            source,
        }
    }
}
