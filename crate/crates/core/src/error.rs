use saq_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T, E = SaqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SaqError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed file at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("code {code} out of range for codebook of size {k}")]
    CodeOutOfRange { code: usize, k: usize },
    #[error("goal is unreachable from the start cell")]
    UnreachableGoal,
    #[error("noise-free expert rollout {trajectory} did not reach the goal")]
    ExpertFailed { trajectory: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
}

impl SaqError {
    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        SaqError::Format {
            offset,
            reason: reason.into(),
        }
    }
}
