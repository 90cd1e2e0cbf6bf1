use thiserror::Error;

/// Errors raised by the lab. Variants map onto the CLI exit codes.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("every rollout group was filtered after {attempts} attempts at step {step}")]
    EmptyBatch { step: usize, attempts: usize },

    #[error("stability alarm at step {step}: {reason}")]
    StabilityAlarm { step: usize, reason: String },

    #[error("gradient check rejected: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        LabError::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
