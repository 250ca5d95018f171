//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MoneError {
    /// Invalid configuration (bad dimensions, top_k > n_experts, ratio out of range, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite or otherwise unusable numeric input.
    #[error("numeric input error: {0}")]
    NumericInput(String),

    /// Dimension mismatch between tensors or accumulators.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid runtime input (out-of-range token id, empty corpus, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed file. `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Mismatched lineage: fingerprints or configs of inputs disagree.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Two artifacts cannot be compared (differing prune-set sizes, ...).
    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MoneError {
    pub fn format_at(offset: u64, message: impl Into<String>) -> Self {
        MoneError::Format { offset, message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, MoneError>;
