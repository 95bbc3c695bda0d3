use thiserror::Error;

use crate::env::PromptId;

#[derive(Debug, Error)]
pub enum LabError {
    /// Bad argument to a pure operation.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("unknown prompt id {0}")]
    UnknownPrompt(PromptId),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible task: {0}")]
    Infeasible(String),

    /// An operation was called on a value that has not gone through a required stage.
    #[error("state error: {0}")]
    State(String),

    #[error("bound not applicable: {0}")]
    Regime(String),

    #[error("non-finite gradient at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
