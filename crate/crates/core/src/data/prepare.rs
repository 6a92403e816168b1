use super::{
    stack_audio, Alignment, DataError, FrameSpans, MultimodalExample, Vocabulary, NUM_EMOTIONS,
};
use crate::model::ModelInputs;

/// An example in model-ready form: stacked audio, embedded text and the
/// per-word spans in model rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub id: String,
    pub word_ids: Vec<usize>,
    pub spans: Vec<FrameSpans>,
    pub inputs: ModelInputs,
    pub emotions: Option<[f64; NUM_EMOTIONS]>,
}

impl PreparedExample {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

/// Validates, encodes and stacks every example. Out-of-vocabulary words must
/// already be filtered with [`Vocabulary::filter_oov`].
pub fn prepare(
    examples: &[MultimodalExample],
    vocab: &Vocabulary,
    alignment: &Alignment,
) -> Result<Vec<PreparedExample>, DataError> {
    examples
        .iter()
        .map(|ex| {
            ex.validate(alignment)?;
            let word_ids = vocab.encode(ex)?;
            let spans = alignment.spans(ex)?;
            Ok(PreparedExample {
                id: ex.id.clone(),
                inputs: ModelInputs {
                    audio: stack_audio(&ex.audio, alignment.stack),
                    visual: ex.visual.clone(),
                    text: vocab.embed(&word_ids),
                },
                word_ids,
                spans,
                emotions: ex.emotions,
            })
        })
        .collect()
}

/// Stacked audio width for a raw frame width.
pub fn stacked_dim(raw_dim: usize, alignment: &Alignment) -> usize {
    raw_dim * alignment.stack
}
