use thiserror::Error;

#[derive(Debug, Error)]
pub enum EbtError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training instability at step {step}: {detail}")]
    Instability { step: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] ebt_autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EbtError {
    pub fn config(msg: impl Into<String>) -> Self {
        EbtError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        EbtError::Contract(msg.into())
    }

    pub fn is_instability(&self) -> bool {
        matches!(self, EbtError::Instability { .. })
    }
}

pub type Result<T> = std::result::Result<T, EbtError>;
