//! Error type shared by every module of the laboratory.

use std::path::PathBuf;

/// Errors raised by model evaluation, training, statistics and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range. `field` names the offending key.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// An input violates an operation's domain (bad token id, task mismatch, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation was called in a state that cannot support it.
    #[error("state error: {0}")]
    State(String),

    /// Statistically or numerically degenerate input (zero variance, zero norm).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The pair generator could not satisfy the margin filter.
    #[error("pair generation exhausted after {attempts} attempts ({accepted} of {requested} pairs accepted)")]
    GenerationExhausted {
        attempts: usize,
        accepted: usize,
        requested: usize,
    },

    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file could not be parsed or has the wrong format tag.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

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
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
