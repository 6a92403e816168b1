use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::numerics::{ParamMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Visual, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn input_dim(self, config: &ModelConfig) -> usize {
        match self {
            Modality::Audio => config.audio_input_dim,
            Modality::Visual => config.visual_input_dim,
            Modality::Text => config.text_embedding_dim,
        }
    }
}

/// Parameter-key prefixes for each stack of encoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Unimodal(Modality),
    /// Cross-modal stack attending from text queries to the given source.
    Cross(Modality),
}

impl Block {
    pub fn prefix(self) -> String {
        match self {
            Block::Unimodal(m) => format!("encoder.{}", m.name()),
            Block::Cross(m) => format!("cross.{}_to_text", m.name()),
        }
    }

    pub fn layer_prefix(self, layer: usize) -> String {
        format!("{}.layer{layer}", self.prefix())
    }
}

pub const MLM_HEAD: &str = "head.mlm";
pub const EMOTION_HEAD: &str = "head.emotion";

/// All learnable tensors, keyed by stable dotted names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    params: ParamMap,
}

/// Parameter specification: key, shape, initializer.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

fn layer_specs(prefix: &str, d: usize, ff: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    for proj in ["query", "key", "value", "output"] {
        out.push((format!("{prefix}.{proj}.weight"), vec![d, d], Init::Xavier));
        out.push((format!("{prefix}.{proj}.bias"), vec![d], Init::Zeros));
    }
    out.push((format!("{prefix}.norm1.gain"), vec![d], Init::Ones));
    out.push((format!("{prefix}.norm1.bias"), vec![d], Init::Zeros));
    out.push((format!("{prefix}.ff1.weight"), vec![d, ff], Init::Xavier));
    out.push((format!("{prefix}.ff1.bias"), vec![ff], Init::Zeros));
    out.push((format!("{prefix}.ff2.weight"), vec![ff, d], Init::Xavier));
    out.push((format!("{prefix}.ff2.bias"), vec![d], Init::Zeros));
    out.push((format!("{prefix}.norm2.gain"), vec![d], Init::Ones));
    out.push((format!("{prefix}.norm2.bias"), vec![d], Init::Zeros));
}

fn encoder_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.model_dim;
    let mut specs = Vec::new();
    for m in Modality::ALL {
        specs.push((
            format!("input.{}.weight", m.name()),
            vec![m.input_dim(config), d],
            Init::Xavier,
        ));
        specs.push((format!("input.{}.bias", m.name()), vec![d], Init::Zeros));
    }
    let blocks = Modality::ALL.into_iter().map(Block::Unimodal).chain([
        Block::Cross(Modality::Audio),
        Block::Cross(Modality::Visual),
    ]);
    for block in blocks {
        for layer in 0..config.encoder_layers {
            layer_specs(
                &block.layer_prefix(layer),
                d,
                config.feedforward_dim,
                &mut specs,
            );
        }
    }
    specs
}

fn head_specs(prefix: &str, d: usize, out_dim: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (format!("{prefix}.weight"), vec![d, out_dim], Init::Xavier),
        (format!("{prefix}.bias"), vec![out_dim], Init::Zeros),
    ]
}

fn materialize<R: Rng + ?Sized>(
    specs: Vec<(String, Vec<usize>, Init)>,
    rng: &mut R,
    params: &mut ParamMap,
) {
    for (key, shape, init) in specs {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::filled(&shape, 1.0),
            Init::Xavier => {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let n = shape[0] * shape[1];
                let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                Tensor::new(shape, data).expect("declared shape matches data")
            }
        };
        params.insert(key, t);
    }
}

impl ModelWeights {
    /// Encoder stacks plus the masked-LM head.
    pub fn init_pretraining<R: Rng + ?Sized>(
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamMap::new();
        materialize(encoder_specs(config), rng, &mut params);
        materialize(
            head_specs(MLM_HEAD, config.model_dim, config.vocab_size),
            rng,
            &mut params,
        );
        Ok(Self { params })
    }

    /// Encoder stacks plus the emotion head, all freshly initialized.
    pub fn init_emotion<R: Rng + ?Sized>(
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamMap::new();
        materialize(encoder_specs(config), rng, &mut params);
        materialize(
            head_specs(EMOTION_HEAD, config.model_dim, config.num_emotions),
            rng,
            &mut params,
        );
        Ok(Self { params })
    }

    /// Keeps every encoder weight, drops the masked-LM head and attaches a
    /// freshly initialized emotion head.
    pub fn into_emotion<R: Rng + ?Sized>(mut self, config: &ModelConfig, rng: &mut R) -> Self {
        let mlm = format!("{MLM_HEAD}.");
        let emo = format!("{EMOTION_HEAD}.");
        self.params
            .retain(|k, _| !k.starts_with(&mlm) && !k.starts_with(&emo));
        materialize(
            head_specs(EMOTION_HEAD, config.model_dim, config.num_emotions),
            rng,
            &mut self.params,
        );
        self
    }

    pub fn from_params(params: ParamMap) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn into_params(self) -> ParamMap {
        self.params
    }

    pub fn get(&self, key: &str) -> Result<&Tensor, ModelError> {
        self.params
            .get(key)
            .ok_or_else(|| ModelError::MissingParam(key.to_string()))
    }

    pub fn has_head(&self, head: &str) -> bool {
        self.params.contains_key(&format!("{head}.weight"))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that every expected tensor exists with the expected shape.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let mut specs = encoder_specs(config);
        if self.has_head(MLM_HEAD) {
            specs.extend(head_specs(MLM_HEAD, config.model_dim, config.vocab_size));
        }
        if self.has_head(EMOTION_HEAD) {
            specs.extend(head_specs(
                EMOTION_HEAD,
                config.model_dim,
                config.num_emotions,
            ));
        }
        for (key, shape, _) in &specs {
            let t = self.get(key)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Dimension {
                    what: key.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if specs.len() != self.params.len() {
            let known: std::collections::BTreeSet<&String> = specs.iter().map(|s| &s.0).collect();
            let extra = self
                .params
                .keys()
                .find(|k| !known.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}
