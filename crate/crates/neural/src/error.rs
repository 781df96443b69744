use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Format(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite activations in layer {layer}")]
    NonFinite { layer: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] ambienc_core::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
