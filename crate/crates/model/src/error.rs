use gridflow_core::GridError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter {0} missing or malformed")]
    MissingParam(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("no training graphs available")]
    EmptyTrainingSet,
    #[error("empty sample for Fisher estimation")]
    EmptySample,
    #[error("replay requested but the buffer is empty")]
    EmptyBuffer,
    #[error("metric tables do not match: {0}")]
    KeyMismatch(String),
    #[error("invalid checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type ModelResult<T> = Result<T, ModelError>;
