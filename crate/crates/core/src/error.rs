//! Crate-wide error type. Exit-code mapping for the CLI lives in `main.rs`:
//! configuration/usage problems exit 2, numerical failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape in {op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}{}", ctx.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        ctx: Option<String>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("duration error: {0}")]
    Duration(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("incompatible checkpoint: missing {missing:?}, unexpected {extra:?}")]
    ManifestMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach a file path to an I/O error so CLI messages name the file.
    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(path.display().to_string(), e)
    }

    /// True for errors that should abort with the CLI's numerical exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric(_))
    }
}
