//! The cross-modal transformer: per-modality encoders, text-anchored
//! cross-modal stacks, fixed-weight fusion and the two output heads.

pub mod checkpoint;
mod config;
mod forward;
mod weights;

use thiserror::Error;

use crate::numerics::NumericsError;

pub use config::{ModelConfig, Residual};
pub use forward::{
    scaled_attention, sinusoidal_table, EncodedSequence, Model, ModelInputs, Session,
};
pub use weights::{Block, Modality, ModelWeights, EMOTION_HEAD, MLM_HEAD};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch for {what}: expected {expected:?}, got {got:?}")]
    Dimension {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("fusion inputs disagree in shape (anchor contract broken): {0}")]
    AnchorContract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
