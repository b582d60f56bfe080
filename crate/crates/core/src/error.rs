use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum AplError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("no detections to attend to")]
    NoDetection,

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AplError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> AplError {
    AplError::InvalidArgument(msg.into())
}
