use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{DataError, MultimodalExample};
use crate::numerics::Tensor;

/// Frame-rate parameters linking millisecond word boundaries to feature rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Alignment {
    /// Raw audio frame hop.
    pub hop_ms: f64,
    /// Raw audio frames concatenated into one model input row.
    pub stack: usize,
    /// Visual frames per second.
    pub fps: f64,
}

impl Default for Alignment {
    fn default() -> Self {
        Self {
            hop_ms: 10.0,
            stack: 5,
            fps: 25.0,
        }
    }
}

/// Half-open row ranges covered by one word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSpans {
    pub audio: Range<usize>,
    pub visual: Range<usize>,
}

fn align_word(s: f64, e: f64, hop_ms: f64, fps: f64) -> Result<FrameSpans, String> {
    if !(s.is_finite() && e.is_finite()) || s < 0.0 {
        return Err(format!("invalid boundary ({s}, {e})"));
    }
    if e < s {
        return Err(format!("end {e} before start {s}"));
    }
    Ok(FrameSpans {
        audio: (s / hop_ms).floor() as usize..(e / hop_ms).floor() as usize,
        visual: (s * fps / 1000.0).floor() as usize..(e * fps / 1000.0).floor() as usize,
    })
}

/// Maps each word to `[floor(start/hop), floor(end/hop))` raw audio frames and
/// `[floor(start·fps/1000), floor(end·fps/1000))` visual frames.
pub fn align(
    boundaries: &[(f64, f64)],
    hop_ms: f64,
    fps: f64,
) -> Result<Vec<FrameSpans>, DataError> {
    boundaries
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| {
            align_word(s, e, hop_ms, fps)
                .map_err(|m| DataError::InvalidArgument(format!("word {i}: {m}")))
        })
        .collect()
}

/// Rescales a raw-frame span to stacked rows with the same floor rule.
pub fn stacked_span(raw: &Range<usize>, stack: usize) -> Range<usize> {
    raw.start / stack..raw.end / stack
}

/// Concatenates non-overlapping groups of `stack` frames; the last group is
/// zero-padded.
pub fn stack_audio(frames: &Tensor, stack: usize) -> Tensor {
    let (t, d) = (frames.rows(), frames.cols());
    let rows = t.div_ceil(stack);
    let mut data = vec![0.0; rows * stack * d];
    data[..t * d].copy_from_slice(frames.data());
    Tensor::new(vec![rows, stack * d], data).expect("stacked buffer sized to shape")
}

/// Inverse of [`stack_audio`], keeping any padding frames.
pub fn unstack_audio(stacked: &Tensor, stack: usize) -> Tensor {
    let (rows, w) = (stacked.rows(), stacked.cols());
    Tensor::new(vec![rows * stack, w / stack], stacked.data().to_vec()).expect("same element count")
}

impl Alignment {
    /// Per-word spans in model rows: stacked audio rows and visual frames,
    /// clipped to the available rows.
    pub fn spans(&self, example: &MultimodalExample) -> Result<Vec<FrameSpans>, DataError> {
        let audio_rows = example.audio.rows().div_ceil(self.stack);
        let visual_rows = example.visual.rows();
        let clip = |r: Range<usize>, n: usize| r.start.min(n)..r.end.min(n);
        example
            .boundaries
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| {
                let raw = align_word(s, e, self.hop_ms, self.fps).map_err(|message| {
                    DataError::Boundary {
                        id: example.id.clone(),
                        index: i,
                        message,
                    }
                })?;
                Ok(FrameSpans {
                    audio: clip(stacked_span(&raw.audio, self.stack), audio_rows),
                    visual: clip(raw.visual, visual_rows),
                })
            })
            .collect()
    }
}
