//! Masked multimodal language-model pre-training: masking plans, joint
//! zero-masking, masked-position losses (softmax and NCE) and the training
//! loop.

mod loss;
mod masking;
mod objective;
mod schedule;
mod train;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::numerics::NumericsError;

pub use loss::{
    masked_softmax_loss, nce_from_scores, nce_loss, softmax_loss_rows, NoiseDistribution,
};
pub use masking::{apply_mask, make_masking_plan, mask_count, MaskingPlan};
pub use objective::MlmObjective;
pub use schedule::{clip_global_norm, global_norm, Adam, LrSchedule};
pub(crate) use train::{add_into, split_indices, stream_rng, STREAM_EXAMPLE, STREAM_SHUFFLE};
pub use train::{
    masked_predictions, mlm_example_loss, pretrain_loop, write_loss_log, LossKind, LossRecord,
    MlmLoss, PretrainConfig, PretrainOutcome, Split,
};

/// Errors shared by the pre-training and fine-tuning loops.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value {value} at epoch {epoch}, step {step} ({example})")]
    NonFinite {
        epoch: usize,
        step: usize,
        example: String,
        value: f64,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
