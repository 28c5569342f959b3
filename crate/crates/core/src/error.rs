use pfs_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("missing prerequisite: {0}")]
    Dependency(String),

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PfsError {
    pub fn is_config(&self) -> bool {
        matches!(self, PfsError::Config(_) | PfsError::Tensor(TensorError::Config(_)))
    }
}

pub type Result<T> = std::result::Result<T, PfsError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PfsError::Config(msg.into()))
}
