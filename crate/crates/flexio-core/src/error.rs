use thiserror::Error;

/// Error type shared across the crate.
#[derive(Error, Debug)]
pub enum FlexioError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    ConfigError(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("data error: {0}")]
    DataError(String),
    #[error("complexity guard: {0}")]
    ComplexityError(String),
    #[error("training aborted: {0}")]
    TrainingAborted(String),
    #[error("checkpoint error: {0}")]
    CheckpointError(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FlexioError>;
