//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GhostError>;

#[derive(Error, Debug)]
pub enum GhostError {
    /// Tensor/operator shape disagreement; names the offending axis.
    #[error("{op}: axis {axis} mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("{context}: objective diverged ({detail}); try smaller step sizes")]
    Divergence { context: &'static str, detail: String },

    #[error("estimated training memory {estimate_bytes} B exceeds budget {budget_bytes} B; reduce splits/permutations or image size")]
    MemoryBudget {
        estimate_bytes: usize,
        budget_bytes: usize,
    },

    #[error("container format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GhostError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        GhostError::InvalidArg(msg.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        GhostError::NonFinite {
            context: context.into(),
        }
    }
}
