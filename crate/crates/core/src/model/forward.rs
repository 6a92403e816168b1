//! Forward computation of the cross-modal transformer on a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::weights::{Block, Modality, EMOTION_HEAD, MLM_HEAD};
use super::{ModelConfig, ModelError, ModelWeights, Residual};
use crate::numerics::{Fault, GradMap, Graph, NumericsError, Tensor, Var};

/// Sinusoidal position table: `sin(pos / 10000^(2i/d))` on even columns and
/// the matching cosine on odd columns.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            row[i] = angle.sin();
            if i + 1 < d {
                row[i + 1] = angle.cos();
            }
        }
    }
    t
}

/// Per-utterance model inputs, already stacked, embedded and masked.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub audio: Tensor,
    pub visual: Tensor,
    pub text: Tensor,
}

impl ModelInputs {
    pub fn get(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub var: Var,
    pub modality: Modality,
    pub len: usize,
}

/// Configuration, weights and the precomputed positional table.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    positional: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self, ModelError> {
        config.validate()?;
        weights.check_against(&config)?;
        let positional = if config.positional_embeddings {
            sinusoidal_table(config.max_positions, config.model_dim)
        } else {
            Tensor::zeros(&[config.max_positions, config.model_dim])
        };
        Ok(Self {
            config,
            weights,
            positional,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(self, None)
    }
}

/// One forward (and optionally backward) pass over a single utterance.
pub struct Session<'m> {
    model: &'m Model,
    graph: Graph<'m>,
    bound: BTreeMap<String, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, fault: Option<Fault>) -> Self {
        Self {
            model,
            graph: Graph::with_fault(fault),
            bound: BTreeMap::new(),
            dropout_rng: None,
        }
    }

    /// Enables dropout (if configured) using `rng` for the masks.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        if self.model.config.dropout > 0.0 {
            self.dropout_rng = Some(rng);
        }
        self
    }

    pub fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    pub fn graph(&self) -> &Graph<'m> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<'m> {
        &mut self.graph
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn param(&mut self, key: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.bound.get(key) {
            return Ok(v);
        }
        let t = self.model.weights.get(key)?;
        let v = self.graph.param(t);
        self.bound.insert(key.to_string(), v);
        Ok(v)
    }

    /// `x · W + b` with `W = {prefix}.weight`, `b = {prefix}.bias`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let xw = self.graph.matmul(x, w)?;
        Ok(self.graph.add_row(xw, b)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let p = self.model.config.dropout;
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let shape = self.graph.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.graph.constant(Tensor::new(shape, mask)?);
        Ok(self.graph.mul(x, mask)?)
    }

    /// Projects each modality to the model width and adds positional rows.
    pub fn embed_inputs(&mut self, inputs: &ModelInputs) -> Result<[Var; 3], ModelError> {
        let config = &self.model.config;
        let mut out = [None; 3];
        for (slot, m) in out.iter_mut().zip(Modality::ALL) {
            let x = inputs.get(m);
            let dim = m.input_dim(config);
            if x.rank() != 2 || x.cols() != dim {
                return Err(ModelError::Dimension {
                    what: format!("{} input", m.name()),
                    expected: vec![x.rows(), dim],
                    got: x.shape().to_vec(),
                });
            }
            let len = x.rows();
            if len == 0 || len > config.max_positions {
                return Err(ModelError::Config(format!(
                    "{} sequence length {len} outside 1..={}",
                    m.name(),
                    config.max_positions
                )));
            }
            let xv = self.graph.constant(x.clone());
            let projected = self.linear(xv, &format!("input.{}", m.name()))?;
            let pos = Tensor::new(
                vec![len, config.model_dim],
                self.model.positional.data()[..len * config.model_dim].to_vec(),
            )?;
            let pos = self.graph.constant(pos);
            *slot = Some(self.graph.add(projected, pos)?);
        }
        Ok(out.map(|v| v.expect("filled above")))
    }

    /// Query from `query_in`, key and value from `kv_in`.
    pub fn project_qkv(
        &mut self,
        query_in: Var,
        kv_in: Var,
        prefix: &str,
    ) -> Result<(Var, Var, Var), ModelError> {
        let q = self.linear(query_in, &format!("{prefix}.query"))?;
        let k = self.linear(kv_in, &format!("{prefix}.key"))?;
        let v = self.linear(kv_in, &format!("{prefix}.value"))?;
        Ok((q, k, v))
    }

    /// Splits into heads, attends per head with divisor `sqrt(d/k)`,
    /// concatenates and applies `{prefix}.output`.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: &str,
    ) -> Result<Var, ModelError> {
        let heads = self.model.config.attention_heads;
        let hd = self.model.config.head_dim();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * hd, (h + 1) * hd);
            let qh = self.graph.slice_cols(q, s, e)?;
            let kh = self.graph.slice_cols(k, s, e)?;
            let vh = self.graph.slice_cols(v, s, e)?;
            outs.push(scaled_attention(&mut self.graph, qh, kh, vh, hd)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            self.graph.concat_cols(&outs)?
        };
        self.linear(cat, &format!("{prefix}.output"))
    }

    /// One encoder layer. `kv_in = None` is self-attention.
    ///
    /// `O = LayerNorm(R + A)`, `S = LayerNorm(O + FF(O))`, where `R` is the
    /// value projection of the query-side stream (equal to `V` under
    /// self-attention) or the raw layer input, per [`Residual`].
    pub fn encoder_layer(
        &mut self,
        query_in: Var,
        kv_in: Option<Var>,
        prefix: &str,
    ) -> Result<Var, ModelError> {
        let kv_src = kv_in.unwrap_or(query_in);
        let (q, k, v) = self.project_qkv(query_in, kv_src, prefix)?;
        let a = self.multi_head_attention(q, k, v, prefix)?;
        let a = self.dropout(a)?;
        let residual = match (self.model.config.residual, kv_in) {
            (Residual::Value, None) => v,
            (Residual::Value, Some(_)) => self.linear(query_in, &format!("{prefix}.value"))?,
            (Residual::Input, _) => query_in,
        };
        let eps = self.model.config.layer_norm_eps;
        let sum = self.graph.add(residual, a)?;
        let g1 = self.param(&format!("{prefix}.norm1.gain"))?;
        let b1 = self.param(&format!("{prefix}.norm1.bias"))?;
        let o = self.graph.layer_norm(sum, g1, b1, eps)?;

        let hidden = self.linear(o, &format!("{prefix}.ff1"))?;
        let hidden = self.graph.relu(hidden);
        let ff = self.linear(hidden, &format!("{prefix}.ff2"))?;
        let ff = self.dropout(ff)?;
        let sum = self.graph.add(o, ff)?;
        let g2 = self.param(&format!("{prefix}.norm2.gain"))?;
        let b2 = self.param(&format!("{prefix}.norm2.bias"))?;
        Ok(self.graph.layer_norm(sum, g2, b2, eps)?)
    }

    pub fn unimodal_encode(
        &mut self,
        features: Var,
        modality: Modality,
    ) -> Result<EncodedSequence, ModelError> {
        let block = Block::Unimodal(modality);
        let mut x = features;
        for layer in 0..self.model.config.encoder_layers {
            x = self.encoder_layer(x, None, &block.layer_prefix(layer))?;
        }
        Ok(EncodedSequence {
            var: x,
            modality,
            len: self.graph.shape(x)[0],
        })
    }

    /// Cross-modal stack: queries from the evolving anchor stream, keys and
    /// values from the fixed source encoding at every layer.
    pub fn cross_modal_encode(
        &mut self,
        source: EncodedSequence,
        anchor: EncodedSequence,
    ) -> Result<EncodedSequence, ModelError> {
        if anchor.modality != Modality::Text || source.modality == Modality::Text {
            return Err(ModelError::Config(format!(
                "cross-modal stack needs a text anchor and a non-text source, got {:?} -> {:?}",
                source.modality, anchor.modality
            )));
        }
        let block = Block::Cross(source.modality);
        let mut x = anchor.var;
        for layer in 0..self.model.config.encoder_layers {
            x = self.encoder_layer(x, Some(source.var), &block.layer_prefix(layer))?;
        }
        Ok(EncodedSequence {
            var: x,
            modality: Modality::Text,
            len: self.graph.shape(x)[0],
        })
    }

    /// `w1·E_T + w2·E_{A→T} + w3·E_{V→T}`.
    pub fn fuse(
        &mut self,
        text: EncodedSequence,
        audio_to_text: EncodedSequence,
        visual_to_text: EncodedSequence,
    ) -> Result<EncodedSequence, ModelError> {
        let [w1, w2, w3] = self.model.config.fusion_weights;
        let a = self.graph.scale(text.var, w1);
        let b = self.graph.scale(audio_to_text.var, w2);
        let c = self.graph.scale(visual_to_text.var, w3);
        let ab = self.graph.add(a, b).map_err(anchor_violation)?;
        let abc = self.graph.add(ab, c).map_err(anchor_violation)?;
        Ok(EncodedSequence {
            var: abc,
            modality: Modality::Text,
            len: text.len,
        })
    }

    /// Full encoder: embedding, uni-modal stacks, cross-modal stacks, fusion.
    pub fn encode(&mut self, inputs: &ModelInputs) -> Result<EncodedSequence, ModelError> {
        let [fa, fv, ft] = self.embed_inputs(inputs)?;
        let sa = self.unimodal_encode(fa, Modality::Audio)?;
        let sv = self.unimodal_encode(fv, Modality::Visual)?;
        let st = self.unimodal_encode(ft, Modality::Text)?;
        let eat = self.cross_modal_encode(sa, st)?;
        let evt = self.cross_modal_encode(sv, st)?;
        self.fuse(st, eat, evt)
    }

    /// Vocabulary logits `[L_text × vocab]`, one row per text position.
    pub fn mlm_logits(&mut self, fused: EncodedSequence) -> Result<Var, ModelError> {
        self.linear(fused.var, MLM_HEAD)
    }

    /// Vocabulary logits for the given text positions only.
    pub fn mlm_logits_at(
        &mut self,
        fused: EncodedSequence,
        rows: &[usize],
    ) -> Result<Var, ModelError> {
        let h = self.graph.gather_rows(fused.var, rows)?;
        self.linear(h, MLM_HEAD)
    }

    /// Logits at `rows[i]` for candidate ids `ids[i]` only.
    pub fn mlm_sampled_logits(
        &mut self,
        fused: EncodedSequence,
        rows: &[usize],
        ids: &[Vec<usize>],
    ) -> Result<Var, ModelError> {
        let h = self.graph.gather_rows(fused.var, rows)?;
        let w = self.param(&format!("{MLM_HEAD}.weight"))?;
        let b = self.param(&format!("{MLM_HEAD}.bias"))?;
        Ok(self.graph.sampled_logits(h, w, b, ids)?)
    }

    /// Mean-pool over positions, linear to emotions, sigmoid.
    pub fn emotion_probs(&mut self, fused: EncodedSequence) -> Result<Var, ModelError> {
        let pooled = self.graph.mean_axis(fused.var, 0)?;
        let d = self.model.config.model_dim;
        let pooled = self.graph.reshape(pooled, &[1, d])?;
        let logits = self.linear(pooled, EMOTION_HEAD)?;
        Ok(self.graph.sigmoid(logits))
    }

    /// Reverse pass; returns gradients for every parameter used.
    pub fn gradients(self, loss: Var) -> Result<GradMap, ModelError> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = GradMap::new();
        for (key, var) in self.bound {
            let g = grads
                .take(var)
                .unwrap_or_else(|| vec![0.0; self.graph.value(var).len()]);
            out.insert(key, g);
        }
        Ok(out)
    }
}

fn anchor_violation(e: NumericsError) -> ModelError {
    ModelError::AnchorContract(e.to_string())
}

/// `softmax(Q Kᵀ / sqrt(d_h)) V` for one head.
pub fn scaled_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    head_dim: usize,
) -> Result<Var, ModelError> {
    if g.shape(k)[0] != g.shape(v)[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "scaled_attention",
            left: g.shape(k).to_vec(),
            right: g.shape(v).to_vec(),
        }
        .into());
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = g.softmax(scores, 1)?;
    Ok(g.matmul(weights, v)?)
}
