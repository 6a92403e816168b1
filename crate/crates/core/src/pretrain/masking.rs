use std::ops::Range;

use rand::seq::index;
use rand::Rng;

use super::TrainError;
use crate::data::{Alignment, FrameSpans, MultimodalExample};
use crate::model::ModelInputs;

/// `max(1, round(fraction · n))`, capped at `n`.
pub fn mask_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

/// Word positions to hide and the feature rows aligned to them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    pub example_id: String,
    /// Sorted, distinct.
    pub positions: Vec<usize>,
    pub audio_spans: Vec<Range<usize>>,
    pub visual_spans: Vec<Range<usize>>,
}

impl MaskingPlan {
    pub fn empty(example_id: &str) -> Self {
        Self {
            example_id: example_id.to_string(),
            positions: Vec::new(),
            audio_spans: Vec::new(),
            visual_spans: Vec::new(),
        }
    }

    /// Plan for explicitly chosen positions.
    pub fn covering(
        example_id: &str,
        spans: &[FrameSpans],
        mut positions: Vec<usize>,
    ) -> Result<Self, TrainError> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&p) = positions.iter().find(|&&p| p >= spans.len()) {
            return Err(TrainError::InvalidArgument(format!(
                "{example_id}: mask position {p} beyond {} words",
                spans.len()
            )));
        }
        Ok(Self {
            example_id: example_id.to_string(),
            audio_spans: positions.iter().map(|&p| spans[p].audio.clone()).collect(),
            visual_spans: positions.iter().map(|&p| spans[p].visual.clone()).collect(),
            positions,
        })
    }

    /// Uniformly samples `mask_count` positions without replacement.
    pub fn sample<R: Rng + ?Sized>(
        example_id: &str,
        spans: &[FrameSpans],
        fraction: f64,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let n = spans.len();
        if n == 0 {
            return Err(TrainError::InvalidArgument(format!(
                "{example_id}: no words to mask"
            )));
        }
        let positions = index::sample(rng, n, mask_count(n, fraction)).into_vec();
        Self::covering(example_id, spans, positions)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn make_masking_plan<R: Rng + ?Sized>(
    example: &MultimodalExample,
    alignment: &Alignment,
    fraction: f64,
    rng: &mut R,
) -> Result<MaskingPlan, TrainError> {
    let spans = alignment.spans(example)?;
    MaskingPlan::sample(&example.id, &spans, fraction, rng)
}

/// Zeroes masked word embeddings and every audio/visual row in the plan's
/// spans. Nothing else changes.
pub fn apply_mask(inputs: &ModelInputs, plan: &MaskingPlan) -> ModelInputs {
    let mut out = inputs.clone();
    for &p in &plan.positions {
        out.text.zero_rows(p..p + 1);
    }
    for r in &plan.audio_spans {
        out.audio.zero_rows(r.clone());
    }
    for r in &plan.visual_spans {
        out.visual.zero_rows(r.clone());
    }
    out
}
