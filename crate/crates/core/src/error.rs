//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions incompatible for an operation; `axis` names the
    /// first offending axis (0 = batch, 1 = channel, 2 = height, 3 = width).
    #[error("shape mismatch on axis {axis}: {msg}")]
    Shape { axis: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// An internal contract was violated by the caller (wrong level count,
    /// non-scalar loss, missing layout span, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Binary file format error; `offset` is the byte position of the first
    /// inconsistent field.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Text format error with a 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("gradient check failure: {0}")]
    GradCheck(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(axis: usize, msg: impl Into<String>) -> Self {
        Error::Shape { axis, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
