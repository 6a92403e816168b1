use serde::{Deserialize, Serialize};

use super::ModelError;

/// Where the first residual connection of an encoder layer is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// `LayerNorm(V + A)`, with `V` the value projection of the query-side stream.
    Value,
    /// `LayerNorm(X + A)`, the usual residual from the layer input.
    Input,
}

/// Architectural hyperparameters. Defaults are the full-scale model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub feedforward_dim: usize,
    /// Audio width after frame stacking.
    pub audio_input_dim: usize,
    pub visual_input_dim: usize,
    pub text_embedding_dim: usize,
    pub vocab_size: usize,
    pub fusion_weights: [f64; 3],
    pub num_emotions: usize,
    pub mask_fraction: f64,
    pub layer_norm_eps: f64,
    pub dropout: f64,
    pub residual: Residual,
    pub positional_embeddings: bool,
    /// Rows in the precomputed sinusoidal table; longer sequences are rejected.
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 512,
            encoder_layers: 4,
            attention_heads: 4,
            feedforward_dim: 200,
            audio_input_dim: 200,
            visual_input_dim: 4096,
            text_embedding_dim: 300,
            vocab_size: 88_000,
            fusion_weights: [0.33, 0.33, 0.33],
            num_emotions: 6,
            mask_fraction: 0.15,
            layer_norm_eps: 1e-5,
            dropout: 0.0,
            residual: Residual::Value,
            positional_embeddings: true,
            max_positions: 4096,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks (`d=8, k=2, N=1, ff=4`).
    pub fn toy() -> Self {
        Self {
            model_dim: 8,
            encoder_layers: 1,
            attention_heads: 2,
            feedforward_dim: 4,
            audio_input_dim: 10,
            visual_input_dim: 3,
            text_embedding_dim: 4,
            vocab_size: 12,
            max_positions: 256,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.attention_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.model_dim == 0 || self.attention_heads == 0 {
            return fail("model_dim and attention_heads must be positive".into());
        }
        if self.model_dim % self.attention_heads != 0 {
            return fail(format!(
                "model_dim {} not divisible by attention_heads {}",
                self.model_dim, self.attention_heads
            ));
        }
        if self.feedforward_dim == 0 || self.vocab_size == 0 || self.num_emotions == 0 {
            return fail("feedforward_dim, vocab_size and num_emotions must be positive".into());
        }
        if self.audio_input_dim == 0 || self.visual_input_dim == 0 || self.text_embedding_dim == 0 {
            return fail("input dimensions must be positive".into());
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return fail(format!(
                "mask_fraction {} outside (0, 1)",
                self.mask_fraction
            ));
        }
        if self
            .fusion_weights
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return fail(format!(
                "fusion weights {:?} must be non-negative",
                self.fusion_weights
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Names of architectural fields that differ between two configs.
    pub fn differing_fields(&self, other: &Self) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {
                $( if self.$f != other.$f { out.push(stringify!($f)); } )*
            };
        }
        cmp!(
            model_dim,
            encoder_layers,
            attention_heads,
            feedforward_dim,
            audio_input_dim,
            visual_input_dim,
            text_embedding_dim,
            vocab_size,
            fusion_weights,
            num_emotions,
            mask_fraction,
            layer_norm_eps,
            dropout,
            residual,
            positional_embeddings,
            max_positions
        );
        out
    }
}
