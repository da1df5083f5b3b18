use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GlassError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GlassError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("failed to decode {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("plane fit failed: {0}")]
    PlaneFit(String),

    #[error("non-finite loss {loss} at epoch {epoch} step {step} (batch {batch_ids:?}); recent losses {history:?}")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
        history: Vec<f64>,
    },

    #[error("non-finite gradient norm {grad_norm} at epoch {epoch} step {step} (batch {batch_ids:?}, loss {loss}); recent losses {history:?}")]
    NonFiniteGradient {
        grad_norm: f64,
        loss: f64,
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
        history: Vec<f64>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GlassError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }
}
