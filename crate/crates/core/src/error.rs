use thiserror::Error;

/// Errors shared across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("representation error: {0}")]
    Representation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid diffusion step: {0}")]
    Step(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("guidance diverged: {0}")]
    GuidanceDivergence(String),
    #[error("training diverged: {0}")]
    TrainingDivergence(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
