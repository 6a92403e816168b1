//! Emotion fine-tuning and evaluation: Likert binarization, class-weighted
//! multi-label loss, weighted accuracy and F1, and modality ablation.

mod labels;
mod metrics;
mod objective;
mod train;

pub use labels::{binarize, class_weights, example_weights, weighted_bce};
pub use metrics::{f1, std_dev, weighted_accuracy, Confusion, EmotionRow, EvalReport, THRESHOLD};
pub use objective::EmotionObjective;
pub use train::{
    ablate, ablate_inputs, emotion_forward, evaluate, finetune_loop, predict, EpochRecord,
    FinetuneConfig, FinetuneOutcome, Init, RunSummary,
};

#[cfg(test)]
mod tests;
