use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{binarize, class_weights, example_weights, std_dev, EvalReport};
use crate::data::{PreparedExample, NUM_EMOTIONS};
use crate::model::{Modality, Model, ModelConfig, ModelInputs, ModelWeights, Session};
use crate::numerics::{GradMap, Var};
use crate::pretrain::{
    add_into, clip_global_norm, split_indices, stream_rng, Adam, LossRecord, LrSchedule, Split,
    TrainError, STREAM_EXAMPLE, STREAM_SHUFFLE,
};

/// Zeroes the feature matrices of the dropped modalities. Lengths and the
/// text stream are untouched.
pub fn ablate_inputs(inputs: &ModelInputs, drop: &[Modality]) -> Result<ModelInputs, TrainError> {
    let mut out = inputs.clone();
    for m in drop {
        match m {
            Modality::Text => {
                return Err(TrainError::Unsupported(
                    "text cannot be dropped: it is the anchor modality of every cross-modal block"
                        .into(),
                ))
            }
            Modality::Audio => out.audio.data_mut().iter_mut().for_each(|v| *v = 0.0),
            Modality::Visual => out.visual.data_mut().iter_mut().for_each(|v| *v = 0.0),
        }
    }
    Ok(out)
}

pub fn ablate(example: &PreparedExample, drop: &[Modality]) -> Result<PreparedExample, TrainError> {
    Ok(PreparedExample {
        inputs: ablate_inputs(&example.inputs, drop)?,
        ..example.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_scale: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub runs: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub drop: Vec<Modality>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr_scale: 1.0,
            warmup_steps: 4000,
            clip_norm: 1.0,
            runs: 10,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            drop: Vec::new(),
            seed: 0,
        }
    }
}

/// Starting point of every run.
#[derive(Clone, Debug)]
pub enum Init {
    Random,
    /// Encoder weights reused, emotion head replaced by a fresh one.
    Pretrained(ModelWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_macro_wa: f64,
    pub dev_macro_f1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run: usize,
    pub best_epoch: usize,
    pub dev: EvalReport,
    pub test: EvalReport,
    pub history: Vec<EpochRecord>,
    pub clamped: usize,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub weights: ModelWeights,
    pub selected_run: usize,
    /// Test metrics of the selected run with across-run spread attached.
    pub report: EvalReport,
    pub runs: Vec<RunSummary>,
}

impl FinetuneOutcome {
    /// Loss log rows of every run, prefixed with the run index.
    pub fn loss_log(&self) -> Vec<(usize, LossRecord)> {
        let mut out = Vec::new();
        for r in &self.runs {
            for h in &r.history {
                out.push((
                    r.run,
                    LossRecord {
                        epoch: h.epoch,
                        split: Split::Train,
                        loss: h.train_loss,
                        lr: h.lr,
                    },
                ));
                out.push((
                    r.run,
                    LossRecord {
                        epoch: h.epoch,
                        split: Split::Dev,
                        loss: h.dev_loss,
                        lr: h.lr,
                    },
                ));
            }
        }
        out
    }
}

struct Labeled<'a> {
    example: &'a PreparedExample,
    targets: [u8; NUM_EMOTIONS],
}

fn labeled(examples: &[PreparedExample]) -> Result<Vec<Labeled<'_>>, TrainError> {
    examples
        .iter()
        .map(|ex| {
            let scores = ex.emotions.ok_or_else(|| {
                TrainError::InvalidArgument(format!("{}: fine-tuning needs emotion scores", ex.id))
            })?;
            Ok(Labeled {
                example: ex,
                targets: binarize(&scores)?,
            })
        })
        .collect()
}

/// Emotion probabilities for one example.
pub fn emotion_forward(session: &mut Session<'_>, inputs: &ModelInputs) -> Result<Var, TrainError> {
    let fused = session.encode(inputs)?;
    Ok(session.emotion_probs(fused)?)
}

fn probs_of(model: &Model, inputs: &ModelInputs) -> Result<[f64; NUM_EMOTIONS], TrainError> {
    let mut s = model.session();
    let p = emotion_forward(&mut s, inputs)?;
    let mut out = [0.0; NUM_EMOTIONS];
    out.copy_from_slice(s.value(p).data());
    Ok(out)
}

/// Probabilities for each example, in order, with `drop` applied.
pub fn predict(
    model: &Model,
    examples: &[PreparedExample],
    drop: &[Modality],
) -> Result<Vec<[f64; NUM_EMOTIONS]>, TrainError> {
    examples
        .par_iter()
        .map(|ex| probs_of(model, &ablate_inputs(&ex.inputs, drop)?))
        .collect()
}

/// Scores `model` on labeled examples.
pub fn evaluate(
    model: &Model,
    examples: &[PreparedExample],
    drop: &[Modality],
) -> Result<EvalReport, TrainError> {
    let targets: Vec<_> = labeled(examples)?.iter().map(|l| l.targets).collect();
    let probs = predict(model, examples, drop)?;
    Ok(EvalReport::from_probs(&probs, &targets))
}

struct Splits<'a> {
    train: Vec<Labeled<'a>>,
    dev: Vec<Labeled<'a>>,
    test: Vec<Labeled<'a>>,
}

fn example_loss(
    model: &Model,
    item: &Labeled<'_>,
    weights: &[(f64, f64); NUM_EMOTIONS],
    drop: &[Modality],
    rng: Option<rand_chacha::ChaCha8Rng>,
) -> Result<(f64, usize, Option<GradMap>), TrainError> {
    let inputs = ablate_inputs(&item.example.inputs, drop)?;
    let train = rng.is_some();
    let mut s = match rng {
        Some(r) => model.session().with_dropout(r),
        None => model.session(),
    };
    let p = emotion_forward(&mut s, &inputs)?;
    let t: Vec<f64> = item.targets.iter().map(|&v| f64::from(v)).collect();
    let w = example_weights(&item.targets, weights);
    let (loss, clamped) = s.graph_mut().weighted_bce(p, &t, &w)?;
    let value = s.value(loss).data()[0];
    if !train || !value.is_finite() {
        return Ok((value, clamped, None));
    }
    Ok((value, clamped, Some(s.gradients(loss)?)))
}

fn mean_loss(
    model: &Model,
    items: &[Labeled<'_>],
    weights: &[(f64, f64); NUM_EMOTIONS],
    drop: &[Modality],
) -> Result<f64, TrainError> {
    let losses: Vec<_> = items
        .par_iter()
        .map(|it| example_loss(model, it, weights, drop, None).map(|r| r.0))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / items.len() as f64)
}

fn report_of(
    model: &Model,
    items: &[Labeled<'_>],
    drop: &[Modality],
) -> Result<EvalReport, TrainError> {
    let probs: Vec<_> = items
        .par_iter()
        .map(|it| probs_of(model, &ablate_inputs(&it.example.inputs, drop)?))
        .collect::<Result<_, _>>()?;
    let targets: Vec<_> = items.iter().map(|it| it.targets).collect();
    Ok(EvalReport::from_probs(&probs, &targets))
}

fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_add(run as u64)
}

fn train_run(
    model_config: &ModelConfig,
    init: &Init,
    splits: &Splits<'_>,
    weights: &[(f64, f64); NUM_EMOTIONS],
    config: &FinetuneConfig,
    run: usize,
) -> Result<(RunSummary, ModelWeights), TrainError> {
    let seed = run_seed(config.seed, run);
    let mut init_rng = stream_rng(seed, 0, 0, 0);
    let start = match init {
        Init::Random => ModelWeights::init_emotion(model_config, &mut init_rng)?,
        Init::Pretrained(w) => w.clone().into_emotion(model_config, &mut init_rng),
    };
    let mut model = Model::new(model_config.clone(), start)?;
    let schedule = LrSchedule {
        scale: config.lr_scale,
        warmup_steps: config.warmup_steps,
        model_dim: model_config.model_dim,
    };
    let mut adam = Adam::default();
    let mut step = 0;
    let mut clamped = 0;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelWeights, EvalReport)> = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        order.shuffle(&mut stream_rng(seed, STREAM_SHUFFLE, epoch as u64, 0));
        let mut total = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let rng = stream_rng(seed, STREAM_EXAMPLE, epoch as u64, i as u64);
                    example_loss(&model, &splits.train[i], weights, &config.drop, Some(rng))
                })
                .collect();
            let mut grads = GradMap::new();
            for (&i, r) in batch.iter().zip(results) {
                let (loss, c, g) = r?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        example: splits.train[i].example.id.clone(),
                        value: loss,
                    });
                }
                total += loss;
                clamped += c;
                add_into(&mut grads, g.expect("gradient requested"));
            }
            let inv = 1.0 / batch.len() as f64;
            grads.values_mut().flatten().for_each(|g| *g *= inv);
            if config.clip_norm > 0.0 {
                clip_global_norm(&mut grads, config.clip_norm);
            }
            lr = schedule.lr_at(step)?;
            adam.step(model.weights_mut().params_mut(), &grads, lr);
        }
        let dev = report_of(&model, &splits.dev, &config.drop)?;
        let dev_loss = mean_loss(&model, &splits.dev, weights, &config.drop)?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / splits.train.len() as f64,
            dev_loss,
            dev_macro_wa: dev.macro_wa,
            dev_macro_f1: dev.macro_f1,
            lr,
        });
        let score = dev.selection_score();
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.weights().clone(), dev));
        }
    }
    let (best_epoch, chosen, dev) = match best {
        Some((_, e, w, d)) => (e, w, d),
        None => {
            let d = report_of(&model, &splits.dev, &config.drop)?;
            (0, model.into_weights(), d)
        }
    };
    let chosen_model = Model::new(model_config.clone(), chosen)?;
    let test = report_of(&chosen_model, &splits.test, &config.drop)?;
    Ok((
        RunSummary {
            run,
            best_epoch,
            dev,
            test,
            history,
            clamped,
        },
        chosen_model.into_weights(),
    ))
}

/// Trains `config.runs` independently seeded runs and keeps the one with the
/// best dev mean of macro WA and macro F1. Within a run the epoch with the
/// best dev score is kept.
pub fn finetune_loop(
    model_config: &ModelConfig,
    init: &Init,
    examples: &[PreparedExample],
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome, TrainError> {
    if config.runs == 0 || config.batch_size == 0 {
        return Err(TrainError::InvalidArgument(
            "runs and batch_size must be positive".into(),
        ));
    }
    if config.drop.contains(&Modality::Text) {
        return Err(TrainError::Unsupported(
            "text cannot be dropped: it is the anchor modality of every cross-modal block".into(),
        ));
    }
    log::info!("fine-tuning config: {config:?}");
    let items = labeled(examples)?;
    let parts = split_indices(
        items.len(),
        &[config.dev_fraction, config.test_fraction],
        config.seed,
    );
    let mut items: Vec<Option<Labeled<'_>>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Labeled<'_>> {
        idx.iter().map(|&i| items[i].take().unwrap()).collect()
    };
    let splits = Splits {
        train: take(&parts[0]),
        dev: take(&parts[1]),
        test: take(&parts[2]),
    };
    if splits.train.is_empty() || splits.dev.is_empty() || splits.test.is_empty() {
        return Err(TrainError::InvalidArgument(format!(
            "split sizes train {} / dev {} / test {}: every split needs at least one example",
            splits.train.len(),
            splits.dev.len(),
            splits.test.len()
        )));
    }
    let train_targets: Vec<_> = splits.train.iter().map(|l| l.targets).collect();
    let weights = class_weights(&train_targets)?;

    let results: Vec<_> = (0..config.runs)
        .into_par_iter()
        .map(|run| train_run(model_config, init, &splits, &weights, config, run))
        .collect();
    let mut runs = Vec::with_capacity(config.runs);
    let mut chosen: Option<(f64, usize, ModelWeights)> = None;
    for r in results {
        let (summary, w) = r?;
        let score = summary.dev.selection_score();
        if chosen.as_ref().is_none_or(|c| score > c.0) {
            chosen = Some((score, summary.run, w));
        }
        runs.push(summary);
    }
    let (_, selected_run, weights) = chosen.expect("at least one run");
    let mut report = runs[selected_run].test.clone();
    let was: Vec<f64> = runs.iter().map(|r| r.test.macro_wa).collect();
    let f1s: Vec<f64> = runs.iter().map(|r| r.test.macro_f1).collect();
    report.runs = runs.len();
    if runs.len() > 1 {
        report.run_std = Some((std_dev(&was), std_dev(&f1s)));
    }
    Ok(FinetuneOutcome {
        weights,
        selected_run,
        report,
        runs,
    })
}
