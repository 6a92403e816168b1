//! Synthetic multimodal corpus with a known answer.
//!
//! Every sentence is drawn from a fixed set of templates and has one slot
//! filled by a member of an ambiguity pair. Both members share the same
//! embedding and the same textual context distribution, so text alone cannot
//! tell them apart. The audio of the whole utterance carries a tone vector
//! `±μ` whose sign identifies the member; it is spread over all frames so that
//! zero-masking the slot's own frames does not erase it. The visual frames
//! carry an independent binary state (see [`VisualCode`]). Emotion labels are
//! a fixed function of (member, visual state).
//!
//! Optional visual pairs add a second slot whose member equals the visual
//! state, which gives pre-training a reason to read the visual stream.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Alignment, DataError, Embeddings, MultimodalExample, NUM_EMOTIONS};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub examples: usize,
    /// Index of the first generated example. Ranges generated with the same
    /// seed never share examples, so a second range is fresh held-out data.
    pub first_example: usize,
    pub vocab_size: usize,
    pub ambiguity_pairs: usize,
    pub visual_pairs: usize,
    /// Number of sentence templates. Each fixes a length, a slot position
    /// and the filler words around it.
    pub templates: usize,
    /// Raw (pre-stacking) audio frame width.
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_ms: f64,
    pub max_word_ms: f64,
    pub max_gap_ms: f64,
    /// Per-dimension magnitude of the audio tone vector.
    pub tone: f64,
    pub audio_noise: f64,
    pub visual_signal: f64,
    pub visual_code: VisualCode,
    pub visual_noise: f64,
    pub labeled: bool,
    pub alignment: Alignment,
}

/// How the visual state is written into the visual frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualCode {
    /// `±ν` along the visual direction.
    #[default]
    Linear,
    /// Two random signs on the two halves of the visual direction; the state
    /// is 1 iff they agree. The frame mean carries no linear trace of it.
    Conjunctive,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            examples: 2000,
            first_example: 0,
            vocab_size: 64,
            ambiguity_pairs: 1,
            visual_pairs: 0,
            templates: 8,
            audio_dim: 8,
            visual_dim: 16,
            text_dim: 16,
            min_words: 5,
            max_words: 9,
            min_word_ms: 120.0,
            max_word_ms: 300.0,
            max_gap_ms: 40.0,
            tone: 0.5,
            audio_noise: 1.0,
            visual_signal: 0.5,
            visual_code: VisualCode::Linear,
            visual_noise: 1.0,
            labeled: true,
            alignment: Alignment::default(),
        }
    }
}

impl SynthConfig {
    pub fn fillers(&self) -> usize {
        self.vocab_size
            .saturating_sub(2 * (self.ambiguity_pairs + self.visual_pairs))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidArgument(m));
        if self.ambiguity_pairs == 0 {
            return bad("ambiguity_pairs must be at least 1".into());
        }
        if self.fillers() < 2 {
            return bad(format!(
                "vocab_size {} leaves {} filler words for {} ambiguity and {} visual pairs; need at least 2",
                self.vocab_size,
                self.fillers(),
                self.ambiguity_pairs,
                self.visual_pairs
            ));
        }
        let slots = 1 + usize::from(self.visual_pairs > 0);
        if self.min_words < slots || self.max_words < self.min_words {
            return bad(format!(
                "sentence length range {}..={} cannot hold {slots} slot(s)",
                self.min_words, self.max_words
            ));
        }
        if self.templates == 0 {
            return bad("templates must be at least 1".into());
        }
        if self.audio_dim == 0 || self.visual_dim == 0 || self.text_dim == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if self.visual_code == VisualCode::Conjunctive && self.visual_dim < 2 {
            return bad("the conjunctive visual code needs visual_dim >= 2".into());
        }
        if !(self.min_word_ms > 0.0
            && self.max_word_ms >= self.min_word_ms
            && self.max_gap_ms >= 0.0)
        {
            return bad("word durations must satisfy 0 < min <= max and gap >= 0".into());
        }
        Ok(())
    }
}

/// Ground truth for one generated example.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub slot: usize,
    pub pair: usize,
    /// 0 for the first member of the pair, 1 for the second.
    pub member: u8,
    pub visual_state: u8,
    pub visual_slot: Option<usize>,
    pub labels: [u8; NUM_EMOTIONS],
}

/// Emotion presence as a function of the slot member and visual state, in
/// the order happy, sad, angry, disgust, surprise, fear.
pub fn emotion_rule(member: u8, visual_state: u8) -> [u8; NUM_EMOTIONS] {
    let (m, s) = (member == 1, visual_state == 1);
    [!m, m, s, m && s, !m && !s, !s].map(u8::from)
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub examples: Vec<MultimodalExample>,
    pub embeddings: Embeddings,
    pub manifest: Vec<ManifestEntry>,
    /// Tone vector per ambiguity pair; the first member carries `+μ`.
    pub tones: Vec<Vec<f64>>,
    /// Visual state 1 carries `+ν`.
    pub visual_direction: Vec<f64>,
}

pub fn pair_token(pair: usize, member: u8) -> String {
    format!("amb{pair}{}", if member == 0 { 'a' } else { 'b' })
}

pub fn visual_token(pair: usize, member: u8) -> String {
    format!("vis{pair}{}", if member == 0 { 'a' } else { 'b' })
}

fn filler_token(i: usize) -> String {
    format!("w{i:03}")
}

const TOKEN_STREAM: u64 = 1 << 32;
const EXAMPLE_STREAM: u64 = 1 << 48;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sign_vector(rng: &mut ChaCha8Rng, dim: usize, magnitude: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            if rng.random_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect()
}

struct Template {
    /// Filler index per position; slot positions hold a placeholder.
    fillers: Vec<usize>,
    slot: usize,
    visual_slot: Option<usize>,
}

impl Template {
    fn draw(rng: &mut ChaCha8Rng, config: &SynthConfig, fillers: usize) -> Self {
        let n = rng.random_range(config.min_words..=config.max_words);
        let slot = rng.random_range(0..n);
        let visual_slot = (config.visual_pairs > 0).then(|| {
            let v = rng.random_range(0..n - 1);
            if v >= slot {
                v + 1
            } else {
                v
            }
        });
        Self {
            fillers: (0..n).map(|_| rng.random_range(0..fillers)).collect(),
            slot,
            visual_slot,
        }
    }
}

pub fn synth_corpus(config: &SynthConfig) -> Result<SynthCorpus, DataError> {
    generate(config, None)
}

/// `members` overrides the drawn pair members, leaving every other random
/// draw untouched.
pub(super) fn generate(
    config: &SynthConfig,
    members: Option<&[u8]>,
) -> Result<SynthCorpus, DataError> {
    config.validate()?;
    let mut tables = stream(config.seed, 0);

    // Tones, the visual direction and every token vector come from streams
    // that do not depend on the vocabulary layout, so corpora that differ only
    // in `visual_pairs` or `examples` share them. Both members of a pair get
    // the same vector, like a written form with two pronunciations.
    let tones: Vec<Vec<f64>> = (0..config.ambiguity_pairs)
        .map(|_| sign_vector(&mut tables, config.audio_dim, config.tone))
        .collect();
    let visual_direction = sign_vector(&mut tables, config.visual_dim, config.visual_signal);

    let mut tokens = Vec::new();
    let mut streams = Vec::new();
    for p in 0..config.ambiguity_pairs {
        for m in 0..2u8 {
            tokens.push(pair_token(p, m));
            streams.push(TOKEN_STREAM | (1 << 24) | p as u64);
        }
    }
    for p in 0..config.visual_pairs {
        for m in 0..2u8 {
            tokens.push(visual_token(p, m));
            streams.push(TOKEN_STREAM | (2 << 24) | p as u64);
        }
    }
    let fillers = config.fillers();
    for i in 0..fillers {
        tokens.push(filler_token(i));
        streams.push(TOKEN_STREAM | (3 << 24) | i as u64);
    }
    let vectors = streams
        .iter()
        .map(|&id| {
            let mut rng = stream(config.seed, id);
            (0..config.text_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect()
        })
        .collect();
    let templates: Vec<Template> = (0..config.templates)
        .map(|_| Template::draw(&mut tables, config, fillers))
        .collect();

    let last = config.first_example + config.examples;
    let width = last.max(1).to_string().len();
    let mut examples = Vec::with_capacity(config.examples);
    let mut manifest = Vec::with_capacity(config.examples);
    for i in 0..config.examples {
        let index = config.first_example + i;
        let id = format!("syn{index:0width$}");
        // Per-example streams: example k is the same whatever range it is
        // generated in.
        let mut text_rng = stream(config.seed, EXAMPLE_STREAM | index as u64);
        let mut latent_rng = stream(config.seed, 2 * EXAMPLE_STREAM | index as u64);
        let mut feature_rng = stream(config.seed, 3 * EXAMPLE_STREAM | index as u64);
        let template = &templates[text_rng.random_range(0..templates.len())];
        let n = template.fillers.len();
        let slot = template.slot;
        let visual_slot = template.visual_slot;
        let pair = text_rng.random_range(0..config.ambiguity_pairs);
        let visual_pair = text_rng.random_range(0..config.visual_pairs.max(1));
        let mut boundaries = Vec::with_capacity(n);
        let mut t = 0.0;
        for _ in 0..n {
            t += text_rng.random_range(0.0..=config.max_gap_ms);
            let len = text_rng.random_range(config.min_word_ms..=config.max_word_ms);
            boundaries.push((t, t + len));
            t += len;
        }
        let duration = t + text_rng.random_range(0.0..=config.max_gap_ms);

        let drawn = u8::from(latent_rng.random_bool(0.5));
        let member = members.map_or(drawn, |m| m[i]);
        let visual_state = u8::from(latent_rng.random_bool(0.5));
        let first_half = match config.visual_code {
            VisualCode::Linear => 1.0,
            VisualCode::Conjunctive if latent_rng.random_bool(0.5) => 1.0,
            VisualCode::Conjunctive => -1.0,
        };
        let intensities: Vec<f64> = (0..NUM_EMOTIONS)
            .map(|_| latent_rng.random_range(1..=9) as f64 / 3.0)
            .collect();

        let words = (0..n)
            .map(|w| {
                if w == slot {
                    pair_token(pair, member)
                } else if Some(w) == visual_slot {
                    visual_token(visual_pair, visual_state)
                } else {
                    filler_token(template.fillers[w])
                }
            })
            .collect();

        let hop = config.alignment.hop_ms;
        let audio_rows = (duration / hop).ceil() as usize;
        let sign = if member == 0 { 1.0 } else { -1.0 };
        let audio: Vec<f64> = (0..audio_rows * config.audio_dim)
            .map(|k| {
                let noise: f64 = feature_rng.sample(StandardNormal);
                sign * tones[pair][k % config.audio_dim] + config.audio_noise * noise
            })
            .collect();
        let visual_rows = (duration * config.alignment.fps / 1000.0).floor() as usize + 1;
        let vsign = if visual_state == 1 { 1.0 } else { -1.0 };
        let half = config.visual_dim / 2;
        let code: Vec<f64> = visual_direction
            .iter()
            .enumerate()
            .map(|(j, &d)| match config.visual_code {
                VisualCode::Linear => vsign * d,
                VisualCode::Conjunctive if j < half => first_half * d,
                VisualCode::Conjunctive => first_half * vsign * d,
            })
            .collect();
        let visual: Vec<f64> = (0..visual_rows * config.visual_dim)
            .map(|k| {
                let noise: f64 = feature_rng.sample(StandardNormal);
                code[k % config.visual_dim] + config.visual_noise * noise
            })
            .collect();

        let labels = emotion_rule(member, visual_state);
        let emotions = config.labeled.then(|| {
            let mut scores = [0.0; NUM_EMOTIONS];
            for k in 0..NUM_EMOTIONS {
                if labels[k] == 1 {
                    scores[k] = intensities[k];
                }
            }
            scores
        });
        examples.push(MultimodalExample {
            id: id.clone(),
            words,
            boundaries,
            audio: Tensor::new(vec![audio_rows, config.audio_dim], audio)?,
            visual: Tensor::new(vec![visual_rows, config.visual_dim], visual)?,
            emotions,
        });
        manifest.push(ManifestEntry {
            id,
            slot,
            pair,
            member,
            visual_state,
            visual_slot,
            labels,
        });
    }
    Ok(SynthCorpus {
        examples,
        embeddings: Embeddings { tokens, vectors },
        manifest,
        tones,
        visual_direction,
    })
}

impl SynthCorpus {
    /// Tab-separated ground truth keyed by example id.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "id\tslot\tpair\tmember\tvisual_state\tvisual_slot\tlabels"
        )?;
        for e in &self.manifest {
            let labels: Vec<String> = e.labels.iter().map(u8::to_string).collect();
            let vslot = e.visual_slot.map_or("-".to_string(), |v| v.to_string());
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{vslot}\t{}",
                e.id,
                e.slot,
                e.pair,
                pair_token(e.pair, e.member),
                e.visual_state,
                labels.join(",")
            )?;
        }
        w.flush()
    }
}
