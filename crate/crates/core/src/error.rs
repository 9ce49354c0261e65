//! Error taxonomy shared across the crate.
//!
//! Variants map onto the process exit categories used by the CLI:
//! configuration problems, data problems (coverage or file format),
//! training divergence, and plain I/O.

use crate::losses::LossBreakdown;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or violated call contract (bad weights, shape
    /// mismatches, out-of-range arguments).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset coverage or file-format problems.
    #[error("data error: {0}")]
    Data(String),

    /// A training step produced a non-finite loss.
    #[error("divergence at step {step}: total loss is not finite ({breakdown:?})")]
    Divergence {
        step: u64,
        breakdown: Box<LossBreakdown>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
