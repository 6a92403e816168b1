use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    apply_mask, clip_global_norm, nce_from_scores, softmax_loss_rows, Adam, LrSchedule,
    MaskingPlan, NoiseDistribution, TrainError,
};
use crate::data::PreparedExample;
use crate::finetune::ablate_inputs;
use crate::model::{Modality, Model, ModelWeights, Session};
use crate::numerics::{Fault, GradMap, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    Nce,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "nce" => Ok(LossKind::Nce),
            other => Err(format!("unknown loss {other:?} (expected softmax or nce)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub k_noise: usize,
    pub lr_scale: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub heldout_fraction: f64,
    /// Modalities zeroed in every example before masking.
    pub drop: Vec<Modality>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            loss: LossKind::Softmax,
            k_noise: 64,
            lr_scale: 1.0,
            warmup_steps: 4000,
            clip_norm: 1.0,
            heldout_fraction: 0.05,
            drop: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
    Dev,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
            Split::Dev => "dev",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

/// Tab-separated `epoch split loss lr` rows with a header line.
pub fn write_loss_log<W: Write>(mut w: W, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "epoch\tsplit\tloss\tlr")?;
    for r in records {
        writeln!(w, "{}\t{}\t{}\t{}", r.epoch, r.split.name(), r.loss, r.lr)?;
    }
    w.flush()
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Weights of the epoch with the lowest held-out loss (train loss when
    /// there is no held-out split); the initialization when `epochs = 0`.
    pub weights: ModelWeights,
    pub best_epoch: usize,
    pub log: Vec<LossRecord>,
    pub steps: usize,
}

/// Independent random stream for one (purpose, epoch, item) triple.
pub(crate) fn stream_rng(seed: u64, purpose: u64, epoch: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) ^ (epoch << 32) ^ item);
    rng
}

pub(crate) const STREAM_SPLIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_EXAMPLE: u64 = 3;
pub(crate) const STREAM_HELDOUT: u64 = 4;

/// Masked-LM objective for one example with its draws already made.
pub enum MlmLoss<'n> {
    Softmax,
    Nce {
        noise: &'n NoiseDistribution,
        candidates: Vec<Vec<usize>>,
        normalizer: f64,
    },
}

/// Builds the masked-LM loss of one example on `session`.
pub fn mlm_example_loss(
    session: &mut Session<'_>,
    example: &PreparedExample,
    plan: &MaskingPlan,
    loss: &MlmLoss<'_>,
) -> Result<Var, TrainError> {
    if plan.is_empty() {
        return Err(TrainError::InvalidArgument(format!(
            "{}: empty masking plan",
            example.id
        )));
    }
    let masked = apply_mask(&example.inputs, plan);
    let fused = session.encode(&masked)?;
    let targets: Vec<usize> = plan
        .positions
        .iter()
        .map(|&p| example.word_ids[p])
        .collect();
    match loss {
        MlmLoss::Softmax => {
            let logits = session.mlm_logits_at(fused, &plan.positions)?;
            softmax_loss_rows(session.graph_mut(), logits, &targets)
        }
        MlmLoss::Nce {
            noise,
            candidates,
            normalizer,
        } => {
            let scores = session.mlm_sampled_logits(fused, &plan.positions, candidates)?;
            nce_from_scores(session.graph_mut(), scores, candidates, noise, *normalizer)
        }
    }
}

/// Draws the plan and (for NCE) the noise words for one example.
fn draw<'n>(
    example: &PreparedExample,
    model: &Model,
    config: &PretrainConfig,
    noise: &'n NoiseDistribution,
    rng: &mut ChaCha8Rng,
) -> Result<(MaskingPlan, MlmLoss<'n>), TrainError> {
    let plan = MaskingPlan::sample(
        &example.id,
        &example.spans,
        model.config().mask_fraction,
        rng,
    )?;
    let loss = match config.loss {
        LossKind::Softmax => MlmLoss::Softmax,
        LossKind::Nce => {
            let targets: Vec<usize> = plan
                .positions
                .iter()
                .map(|&p| example.word_ids[p])
                .collect();
            MlmLoss::Nce {
                noise,
                candidates: noise.candidates(&targets, config.k_noise, rng),
                normalizer: model.config().vocab_size as f64,
            }
        }
    };
    Ok((plan, loss))
}

fn example_step(
    model: &Model,
    example: &PreparedExample,
    config: &PretrainConfig,
    noise: &NoiseDistribution,
    mut rng: ChaCha8Rng,
    with_grad: bool,
) -> Result<(f64, Option<GradMap>), TrainError> {
    let (plan, loss) = draw(example, model, config, noise, &mut rng)?;
    let mut session = Session::new(model, None::<Fault>).with_dropout(rng);
    let loss_var = mlm_example_loss(&mut session, example, &plan, &loss)?;
    let value = session.value(loss_var).data()[0];
    if !with_grad || !value.is_finite() {
        return Ok((value, None));
    }
    Ok((value, Some(session.gradients(loss_var)?)))
}

/// Applies `drop` to every example.
fn ablated(
    examples: &[PreparedExample],
    drop: &[Modality],
) -> Result<Vec<PreparedExample>, TrainError> {
    examples
        .iter()
        .map(|ex| {
            Ok(PreparedExample {
                inputs: ablate_inputs(&ex.inputs, drop)?,
                ..ex.clone()
            })
        })
        .collect()
}

/// Deterministic split: shuffle indices under the seed, hold out the tail.
pub(crate) fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_SPLIT, 0, 0));
    let mut parts = Vec::new();
    let mut end = n;
    for &f in fractions.iter().rev() {
        let take = ((f * n as f64).round() as usize).min(end);
        parts.push(order[end - take..end].to_vec());
        end -= take;
    }
    parts.push(order[..end].to_vec());
    parts.reverse();
    parts
}

pub(crate) fn add_into(total: &mut GradMap, g: GradMap) {
    for (k, v) in g {
        match total.get_mut(&k) {
            Some(t) => t.iter_mut().zip(v).for_each(|(a, b)| *a += b),
            None => {
                total.insert(k, v);
            }
        }
    }
}

/// Trains the masked-LM objective with Adam under the warmup schedule.
///
/// Every random draw comes from a stream keyed by (seed, epoch, example), so
/// results do not depend on thread scheduling. `counts` are unigram counts
/// over the vocabulary, used for the noise distribution.
pub fn pretrain_loop(
    initial: Model,
    examples: &[PreparedExample],
    counts: &[u64],
    config: &PretrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::InvalidArgument(
            "pre-training needs at least one example".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(TrainError::InvalidArgument(
            "batch_size must be positive".into(),
        ));
    }
    if config.loss == LossKind::Nce && config.k_noise == 0 {
        return Err(TrainError::InvalidArgument(
            "k_noise must be at least 1".into(),
        ));
    }
    if counts.len() != initial.config().vocab_size {
        return Err(TrainError::InvalidArgument(format!(
            "{} unigram counts for vocabulary of {}",
            counts.len(),
            initial.config().vocab_size
        )));
    }
    if config.drop.contains(&Modality::Text) {
        return Err(TrainError::Unsupported(
            "text cannot be dropped: it is the anchor modality of every cross-modal block".into(),
        ));
    }
    log::info!("pre-training config: {config:?}");
    let examples = ablated(examples, &config.drop)?;
    let parts = split_indices(examples.len(), &[config.heldout_fraction], config.seed);
    let (train, heldout) = (&parts[0], &parts[1]);
    if train.is_empty() {
        return Err(TrainError::InvalidArgument(
            "held-out split leaves no training examples".into(),
        ));
    }
    let noise = NoiseDistribution::from_counts(counts)?;
    let schedule = LrSchedule {
        scale: config.lr_scale,
        warmup_steps: config.warmup_steps,
        model_dim: initial.config().model_dim,
    };

    let mut model = initial;
    let mut best = (f64::INFINITY, 0usize, model.weights().clone());
    let mut adam = Adam::default();
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut order = train.clone();
        order.shuffle(&mut stream_rng(
            config.seed,
            STREAM_SHUFFLE,
            epoch as u64,
            0,
        ));
        let mut total = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let rng = stream_rng(config.seed, STREAM_EXAMPLE, epoch as u64, i as u64);
                    example_step(&model, &examples[i], config, &noise, rng, true)
                })
                .collect();
            let mut grads = GradMap::new();
            for (&i, r) in batch.iter().zip(results) {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        example: examples[i].id.clone(),
                        value: loss,
                    });
                }
                total += loss;
                add_into(&mut grads, g.expect("gradient requested"));
            }
            let inv = 1.0 / batch.len() as f64;
            grads.values_mut().flatten().for_each(|g| *g *= inv);
            if config.clip_norm > 0.0 {
                let norm = clip_global_norm(&mut grads, config.clip_norm);
                if !norm.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        example: format!("batch of {}", batch.len()),
                        value: norm,
                    });
                }
            }
            lr = schedule.lr_at(step)?;
            adam.step(model.weights_mut().params_mut(), &grads, lr);
        }
        let train_loss = total / train.len() as f64;
        log.push(LossRecord {
            epoch,
            split: Split::Train,
            loss: train_loss,
            lr,
        });
        let score = if heldout.is_empty() {
            train_loss
        } else {
            let h = heldout_loss(&model, &examples, heldout, config, &noise, epoch)?;
            log.push(LossRecord {
                epoch,
                split: Split::Heldout,
                loss: h,
                lr,
            });
            log::info!("epoch {epoch}: train {train_loss:.6} heldout {h:.6} lr {lr:.3e}");
            h
        };
        if score < best.0 {
            best = (score, epoch, model.weights().clone());
        }
    }
    Ok(PretrainOutcome {
        weights: best.2,
        best_epoch: best.1,
        log,
        steps: step,
    })
}

/// Held-out loss with draws fixed across epochs.
fn heldout_loss(
    model: &Model,
    examples: &[PreparedExample],
    heldout: &[usize],
    config: &PretrainConfig,
    noise: &NoiseDistribution,
    epoch: usize,
) -> Result<f64, TrainError> {
    let losses: Vec<_> = heldout
        .par_iter()
        .map(|&i| {
            let rng = stream_rng(config.seed, STREAM_HELDOUT, 0, i as u64);
            example_step(model, &examples[i], config, noise, rng, false).map(|r| r.0)
        })
        .collect();
    let mut total = 0.0;
    for (&i, l) in heldout.iter().zip(losses) {
        let l = l?;
        if !l.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                step: 0,
                example: examples[i].id.clone(),
                value: l,
            });
        }
        total += l;
    }
    Ok(total / heldout.len() as f64)
}

/// Argmax predictions at the plan's masked positions.
pub fn masked_predictions(
    model: &Model,
    example: &PreparedExample,
    plan: &MaskingPlan,
) -> Result<Vec<usize>, TrainError> {
    let masked = apply_mask(&example.inputs, plan);
    let mut s = model.session();
    let fused = s.encode(&masked)?;
    let logits = s.mlm_logits_at(fused, &plan.positions)?;
    let t = s.value(logits);
    Ok((0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}
