//! Crate-wide error type.
//!
//! Three kinds matter downstream: configuration problems, data problems,
//! and numerical failures (non-finite values mid-training). The CLI maps
//! each kind to a distinct exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, incompatible shapes, out-of-range knobs.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or pathological input data (malformed files, degenerate labels).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value where a finite one is required.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
