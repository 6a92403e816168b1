//! Utterance records, the on-disk dataset format, word/frame alignment,
//! vocabularies and the synthetic corpus generator.

mod align;
mod format;
mod prepare;
mod synth;
mod vocab;

use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

pub use align::{align, stack_audio, stacked_span, unstack_audio, Alignment, FrameSpans};
pub use format::{
    read_dataset, read_dataset_from, write_dataset, write_dataset_to, FORMAT_NAME, FORMAT_VERSION,
};
pub use prepare::{prepare, stacked_dim, PreparedExample};
pub use synth::{
    emotion_rule, pair_token, synth_corpus, visual_token, ManifestEntry, SynthConfig, SynthCorpus,
    VisualCode,
};
pub use vocab::{load_embeddings, Embeddings, OovReport, Vocabulary};

pub const NUM_EMOTIONS: usize = 6;
pub const EMOTIONS: [&str; NUM_EMOTIONS] = ["happy", "sad", "angry", "disgust", "surprise", "fear"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {path}: {message}")]
    Format {
        line: usize,
        path: String,
        message: String,
    },
    #[error("record {id}: {field}: {message}")]
    Record {
        id: String,
        field: String,
        message: String,
    },
    #[error("record {id}: word {index}: {message}")]
    Boundary {
        id: String,
        index: usize,
        message: String,
    },
    #[error("embeddings line {line}: {message}")]
    Embedding { line: usize, message: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One utterance: words with time boundaries, raw audio frames at the audio
/// hop, visual frames at the video rate and optional Likert emotion scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalExample {
    pub id: String,
    pub words: Vec<String>,
    /// `(start_ms, end_ms)` per word.
    pub boundaries: Vec<(f64, f64)>,
    pub audio: Tensor,
    pub visual: Tensor,
    pub emotions: Option<[f64; NUM_EMOTIONS]>,
}

impl MultimodalExample {
    pub fn duration_ms(&self, alignment: &Alignment) -> f64 {
        self.audio.rows() as f64 * alignment.hop_ms
    }

    /// Boundaries are finite, ordered, non-overlapping and inside the clip.
    pub fn validate(&self, alignment: &Alignment) -> Result<(), DataError> {
        if self.words.len() != self.boundaries.len() {
            return Err(DataError::Record {
                id: self.id.clone(),
                field: "boundaries".into(),
                message: format!(
                    "{} boundaries for {} words",
                    self.boundaries.len(),
                    self.words.len()
                ),
            });
        }
        if self.audio.rank() != 2 || self.visual.rank() != 2 {
            return Err(DataError::Record {
                id: self.id.clone(),
                field: "audio/visual".into(),
                message: "feature payloads must be matrices".into(),
            });
        }
        let duration = self.duration_ms(alignment);
        let mut prev_end = 0.0;
        for (i, &(s, e)) in self.boundaries.iter().enumerate() {
            let fail = |message: String| DataError::Boundary {
                id: self.id.clone(),
                index: i,
                message,
            };
            if !(s.is_finite() && e.is_finite()) {
                return Err(fail("non-finite boundary".into()));
            }
            if e < s {
                return Err(fail(format!("end {e} before start {s}")));
            }
            if s < prev_end {
                return Err(fail(format!(
                    "start {s} overlaps previous word ending at {prev_end}"
                )));
            }
            if e > duration {
                return Err(fail(format!("end {e} beyond clip duration {duration}")));
            }
            prev_end = e;
        }
        if let Some(scores) = &self.emotions {
            for (k, &v) in scores.iter().enumerate() {
                if !(0.0..=3.0).contains(&v) {
                    return Err(DataError::Record {
                        id: self.id.clone(),
                        field: format!("emotions[{k}]"),
                        message: format!("score {v} outside [0, 3]"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
