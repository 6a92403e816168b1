//! Cross-modal transformer for multimodal masked-LM pre-training and
//! multi-label emotion fine-tuning.

pub mod data;
pub mod finetune;
pub mod model;
pub mod numerics;
pub mod pretrain;
