use std::path::{Path, PathBuf};

use crossmodal::data::{
    load_embeddings, prepare, read_dataset, stacked_dim, Alignment, PreparedExample, Vocabulary,
};
use crossmodal::model::ModelConfig;

use crate::error::CliError;

pub const DATA_FILE: &str = "data.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

pub struct Dataset {
    pub examples: Vec<PreparedExample>,
    pub vocab: Vocabulary,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub data_path: PathBuf,
    pub embeddings_path: PathBuf,
}

fn locate(data: &Path, embeddings: Option<&Path>) -> Result<(PathBuf, PathBuf), CliError> {
    if !data.exists() {
        return Err(CliError::Io(format!(
            "{}: no such file or directory",
            data.display()
        )));
    }
    let (file, dir) = if data.is_dir() {
        (data.join(DATA_FILE), data.to_path_buf())
    } else {
        let dir = data.parent().unwrap_or(Path::new(".")).to_path_buf();
        (data.to_path_buf(), dir)
    };
    let emb = embeddings.map_or_else(|| dir.join(EMBEDDINGS_FILE), Path::to_path_buf);
    Ok((file, emb))
}

/// Reads records and embeddings, drops out-of-vocabulary words, counts
/// unigrams and converts everything to model inputs.
pub fn load(
    data: &Path,
    embeddings: Option<&Path>,
    alignment: &Alignment,
) -> Result<Dataset, CliError> {
    let (data_path, embeddings_path) = locate(data, embeddings)?;
    let raw = read_dataset(&data_path).map_err(|e| match e {
        crossmodal::data::DataError::Io(io) => CliError::io(&data_path, io),
        other => CliError::Data(format!("{}: {other}", data_path.display())),
    })?;
    let emb = load_embeddings(&embeddings_path).map_err(|e| match e {
        crossmodal::data::DataError::Io(io) => CliError::io(&embeddings_path, io),
        other => CliError::Data(format!("{}: {other}", embeddings_path.display())),
    })?;
    let mut vocab = Vocabulary::from_embeddings(&emb)?;
    let (raw, _) = vocab.filter_oov(raw);
    let Some(first) = raw.first() else {
        return Err(CliError::Data(format!(
            "{}: no usable examples",
            data_path.display()
        )));
    };
    let (audio_dim, visual_dim) = (first.audio.cols(), first.visual.cols());
    if let Some(bad) = raw
        .iter()
        .find(|ex| ex.audio.cols() != audio_dim || ex.visual.cols() != visual_dim)
    {
        return Err(CliError::Data(format!(
            "record {}: feature widths ({}, {}) differ from the first record ({audio_dim}, {visual_dim})",
            bad.id,
            bad.audio.cols(),
            bad.visual.cols()
        )));
    }
    vocab.count_unigrams(&raw);
    let examples = prepare(&raw, &vocab, alignment)?;
    Ok(Dataset {
        examples,
        vocab,
        audio_dim,
        visual_dim,
        data_path,
        embeddings_path,
    })
}

impl Dataset {
    /// `base` with the input widths and vocabulary size this data implies.
    pub fn shape_config(&self, base: &ModelConfig, alignment: &Alignment) -> ModelConfig {
        ModelConfig {
            audio_input_dim: stacked_dim(self.audio_dim, alignment),
            visual_input_dim: self.visual_dim,
            text_embedding_dim: self.vocab.dim(),
            vocab_size: self.vocab.len(),
            ..base.clone()
        }
    }

    /// Input widths that disagree with `config`.
    pub fn input_mismatches(
        &self,
        config: &ModelConfig,
        alignment: &Alignment,
    ) -> Vec<&'static str> {
        let implied = self.shape_config(config, alignment);
        config
            .differing_fields(&implied)
            .into_iter()
            .filter(|f| *f != "vocab_size")
            .collect()
    }
}
