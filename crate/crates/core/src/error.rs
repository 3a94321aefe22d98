//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, XmodalError>;

#[derive(Debug, Error)]
pub enum XmodalError {
    #[error("configuration error in {context}: {msg}")]
    Config { context: &'static str, msg: String },

    #[error("validation error in {context}: {msg}")]
    Validation { context: &'static str, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty sentence after tokenization")]
    EmptySentence,

    #[error("empty component: need at least one sentence")]
    EmptyComponent,

    #[error("degenerate input in {context}: {msg}")]
    DegenerateInput { context: &'static str, msg: String },

    #[error("batch too small: got {got}, need at least 2")]
    BatchTooSmall { got: usize },

    #[error("invalid projection: from and to space must differ (got {space})")]
    InvalidProjection { space: &'static str },

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl XmodalError {
    pub fn config(context: &'static str, msg: impl Into<String>) -> Self {
        XmodalError::Config {
            context,
            msg: msg.into(),
        }
    }

    pub fn validation(context: &'static str, msg: impl Into<String>) -> Self {
        XmodalError::Validation {
            context,
            msg: msg.into(),
        }
    }

    /// Exit code the CLI maps this error to: 1 for config/validation
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            XmodalError::Config { .. }
            | XmodalError::Validation { .. }
            | XmodalError::Parse { .. }
            | XmodalError::EmptySentence
            | XmodalError::EmptyComponent
            | XmodalError::BatchTooSmall { .. }
            | XmodalError::InvalidProjection { .. } => 1,
            _ => 2,
        }
    }
}
