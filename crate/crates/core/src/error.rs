//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two array shapes that were required to agree did not.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single array had a shape the operation cannot accept.
    #[error("bad shape in {op}: got {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// An API precondition was violated (e.g. stepping an unpopulated state).
    #[error("contract violation in {op}: {reason}")]
    Contract { op: &'static str, reason: String },

    /// A probe point of a numeric verification produced a non-finite value.
    #[error("non-finite value at coordinate {coord} during {op}")]
    NonFinite { op: &'static str, coord: usize },

    /// Malformed external data (dataset files, checkpoints).
    #[error("data error in {path}: {reason}")]
    Data { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Training diverged or a numeric invariant failed at runtime.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
