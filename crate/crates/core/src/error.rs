//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or stacked vector would exceed the configured element-count
    /// limit. Reported, never a panic: callers decide whether to raise the
    /// limit or pick a smaller truncation.
    #[error("size limit exceeded: {required} elements required, {allowed} allowed ({context})")]
    SizeLimit {
        required: u128,
        allowed: u128,
        context: String,
    },

    #[error("model validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch in F_{degree}: expected {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        degree: usize,
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },

    #[error("probabilities sum to {sum}, expected 1 within 1e-12")]
    ProbabilitySum { sum: f64 },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("quadrature did not converge for {context}: achieved {achieved:e}, wanted {wanted:e}")]
    Quadrature {
        context: String,
        achieved: f64,
        wanted: f64,
    },

    /// The truncated system produced a non-finite entry. This is informative
    /// rather than fatal: truncated moment systems can diverge.
    #[error("divergence at step {step}: non-finite entry in the moment state")]
    Divergence { step: usize },

    #[error("block index {index} out of range (max {max})")]
    BlockOutOfRange { index: usize, max: usize },

    #[error("{0}")]
    Unsupported(String),

    #[error("cache file rejected: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
