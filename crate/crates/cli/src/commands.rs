use std::fmt::Write as _;
use std::path::Path;

use crossmodal::data::{
    synth_corpus, write_dataset_to, Alignment, PreparedExample, SynthConfig, Vocabulary,
};
use crossmodal::finetune::{evaluate, finetune_loop, FinetuneConfig, Init};
use crossmodal::model::{checkpoint, Model, ModelConfig, ModelError, ModelWeights, EMOTION_HEAD};
use crossmodal::numerics::{grad_check, Fault};
use crossmodal::pretrain::{
    pretrain_loop, write_loss_log, MaskingPlan, MlmObjective, NoiseDistribution, PretrainConfig,
    Split,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::args::{EvalArgs, FinetuneArgs, GradcheckArgs, PretrainArgs, SynthArgs};
use crate::config::{section, Layers};
use crate::dataset::{self, Dataset, DATA_FILE, EMBEDDINGS_FILE};
use crate::error::CliError;
use crate::output::{int, Manifest, OutDir, CHECKPOINT, LOSSES, MANIFEST, REPORT_KV, REPORT_TEXT};

pub const TRUTH_FILE: &str = "truth.tsv";

fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelWeights), CliError> {
    checkpoint::load(path).map_err(|e| match e {
        ModelError::Io(io) => CliError::io(path, io),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

/// Model config for `data`: architecture from defaults and the config file,
/// input widths and vocabulary size from the data. Explicit settings that
/// contradict the data are an error.
fn model_for_data(
    layers: &Layers,
    data: &Dataset,
    alignment: &Alignment,
    base: &ModelConfig,
) -> Result<ModelConfig, CliError> {
    let resolved = layers.resolve("model", base)?;
    let implied = data.shape_config(&resolved, alignment);
    let conflicts: Vec<&str> = resolved
        .differing_fields(&implied)
        .into_iter()
        .filter(|f| layers.explicit("model", f))
        .collect();
    if !conflicts.is_empty() {
        return Err(CliError::Data(format!(
            "[model] settings disagree with {}: {}",
            data.data_path.display(),
            conflicts.join(", ")
        )));
    }
    implied.validate()?;
    Ok(implied)
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut layers = Layers::load(a.config.config.as_deref())?;
    layers.flag("synth", "seed", a.config.seed)?;
    layers.flag("synth", "examples", a.examples)?;
    layers.flag("synth", "first_example", a.first_example)?;
    layers.flag("synth", "vocab_size", a.vocab)?;
    layers.flag("synth", "ambiguity_pairs", a.pairs)?;
    layers.flag("synth", "visual_pairs", a.visual_pairs)?;
    layers.flag("synth", "visual_code", a.visual_code)?;
    layers.flag("synth", "labeled", a.unlabeled.then_some(false))?;
    let config: SynthConfig = layers.resolve("synth", &SynthConfig::default())?;
    let mut manifest = Manifest::new("synth");
    manifest.seed(config.seed);

    let corpus = synth_corpus(&config)?;
    let out = OutDir::create(
        &a.out.out,
        &[DATA_FILE, EMBEDDINGS_FILE, TRUTH_FILE],
        a.out.force,
    )?;
    let mut buf = Vec::new();
    write_dataset_to(&mut buf, &corpus.examples)?;
    manifest.path("data", &out.write(DATA_FILE, &buf)?);
    buf.clear();
    corpus
        .embeddings
        .write(&mut buf)
        .map_err(|e| CliError::io(&out.path(EMBEDDINGS_FILE), e))?;
    manifest.path("embeddings", &out.write(EMBEDDINGS_FILE, &buf)?);

    let mut truth = String::from("id\tslot\tpair\tmember\tvisual_slot\tvisual_state\tlabels\n");
    for m in &corpus.manifest {
        let vslot = m.visual_slot.map_or("-".to_string(), |v| v.to_string());
        let labels: String = m.labels.iter().map(u8::to_string).collect();
        let _ = writeln!(
            truth,
            "{}\t{}\t{}\t{}\t{vslot}\t{}\t{labels}",
            m.id, m.slot, m.pair, m.member, m.visual_state
        );
    }
    manifest.path("truth", &out.write(TRUTH_FILE, truth.as_bytes())?);
    manifest.path("out", &a.out.out);
    manifest.config("synth", section(&config)?);
    manifest.result("examples", int(corpus.examples.len()));
    manifest.result("vocabulary", int(corpus.embeddings.tokens.len()));
    manifest.write(&out, &layers)?;
    println!(
        "wrote {} examples ({} tokens) to {}",
        corpus.examples.len(),
        corpus.embeddings.tokens.len(),
        a.out.out.display()
    );
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let mut layers = Layers::load(a.config.config.as_deref())?;
    layers.flag("pretrain", "seed", a.config.seed)?;
    layers.flag("pretrain", "loss", a.loss)?;
    layers.flag("pretrain", "epochs", a.epochs)?;
    layers.flag("pretrain", "batch_size", a.batch_size)?;
    layers.flag("pretrain", "k_noise", a.k_noise)?;
    layers.flag("pretrain", "lr_scale", a.lr_scale)?;
    layers.flag("pretrain", "warmup_steps", a.warmup_steps)?;
    layers.flag("pretrain", "drop", a.drop.map(|d| d.0))?;
    let alignment: Alignment = layers.resolve("alignment", &Alignment::default())?;
    let config: PretrainConfig = layers.resolve("pretrain", &PretrainConfig::default())?;
    let mut manifest = Manifest::new("pretrain");
    manifest.seed(config.seed);

    let data = dataset::load(&a.data.data, a.data.embeddings.as_deref(), &alignment)?;
    let model_config = model_for_data(&layers, &data, &alignment, &ModelConfig::default())?;
    let out = OutDir::create(&a.out.out, &[CHECKPOINT, LOSSES], a.out.force)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = ModelWeights::init_pretraining(&model_config, &mut rng)?;
    let model = Model::new(model_config.clone(), weights)?;
    let outcome = pretrain_loop(model, &data.examples, data.vocab.counts(), &config)?;

    let monitored = if outcome.log.iter().any(|r| r.split == Split::Heldout) {
        Split::Heldout
    } else {
        Split::Train
    };
    for r in outcome.log.iter().filter(|r| r.split == monitored) {
        println!("epoch {}\t{} loss {:.6}", r.epoch, r.split.name(), r.loss);
    }

    let ckpt = checkpoint::to_bytes(&model_config, &outcome.weights);
    manifest.path("checkpoint", &out.write(CHECKPOINT, &ckpt)?);
    let mut log = Vec::new();
    write_loss_log(&mut log, &outcome.log).map_err(|e| CliError::io(&out.path(LOSSES), e))?;
    manifest.path("losses", &out.write(LOSSES, &log)?);
    manifest.path("data", &data.data_path);
    manifest.path("embeddings", &data.embeddings_path);
    manifest.path("out", &a.out.out);
    manifest.config("model", section(&model_config)?);
    manifest.config("pretrain", section(&config)?);
    manifest.config("alignment", section(&alignment)?);
    manifest.result("examples", int(data.examples.len()));
    manifest.result("steps", int(outcome.steps));
    manifest.result("best_epoch", int(outcome.best_epoch));
    if let Some(r) = outcome.log.iter().rev().find(|r| r.split == monitored) {
        manifest.result(&format!("final_{}_loss", monitored.name()), r.loss);
    }
    manifest.write(&out, &layers)?;
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<(), CliError> {
    let mut layers = Layers::load(a.config.config.as_deref())?;
    layers.flag("finetune", "seed", a.config.seed)?;
    layers.flag("finetune", "runs", a.runs)?;
    layers.flag("finetune", "epochs", a.epochs)?;
    layers.flag("finetune", "batch_size", a.batch_size)?;
    layers.flag("finetune", "lr_scale", a.lr_scale)?;
    layers.flag("finetune", "warmup_steps", a.warmup_steps)?;
    layers.flag("finetune", "drop", a.drop.map(|d| d.0))?;
    let alignment: Alignment = layers.resolve("alignment", &Alignment::default())?;
    let config: FinetuneConfig = layers.resolve("finetune", &FinetuneConfig::default())?;
    let mut manifest = Manifest::new("finetune");
    manifest.seed(config.seed);

    let data = dataset::load(&a.data.data, a.data.embeddings.as_deref(), &alignment)?;
    let (model_config, init) = if a.init == "random" {
        let mc = model_for_data(&layers, &data, &alignment, &ModelConfig::default())?;
        (mc, Init::Random)
    } else {
        let path = Path::new(&a.init);
        let (saved, weights) = load_checkpoint(path)?;
        let requested = layers.resolve("model", &saved)?;
        let differing = saved.differing_fields(&requested);
        if !differing.is_empty() {
            return Err(CliError::Data(format!(
                "{}: checkpoint config differs from the requested [model] settings in: {}",
                path.display(),
                differing.join(", ")
            )));
        }
        let differing = data.input_mismatches(&saved, &alignment);
        if !differing.is_empty() {
            return Err(CliError::Data(format!(
                "{}: checkpoint config does not match {} in: {}",
                path.display(),
                data.data_path.display(),
                differing.join(", ")
            )));
        }
        manifest.path("init", path);
        (saved, Init::Pretrained(weights))
    };
    let out = OutDir::create(
        &a.out.out,
        &[CHECKPOINT, LOSSES, REPORT_TEXT, REPORT_KV],
        a.out.force,
    )?;
    let outcome = finetune_loop(&model_config, &init, &data.examples, &config)?;

    let text = outcome.report.to_text();
    print!("{text}");
    let ckpt = checkpoint::to_bytes(&model_config, &outcome.weights);
    manifest.path("checkpoint", &out.write(CHECKPOINT, &ckpt)?);
    let mut log = String::from("run\tepoch\tsplit\tloss\tlr\n");
    for (run, r) in outcome.loss_log() {
        let _ = writeln!(
            log,
            "{run}\t{}\t{}\t{}\t{}",
            r.epoch,
            r.split.name(),
            r.loss,
            r.lr
        );
    }
    manifest.path("losses", &out.write(LOSSES, log.as_bytes())?);
    manifest.path("report", &out.write(REPORT_TEXT, text.as_bytes())?);
    manifest.path(
        "report_kv",
        &out.write(REPORT_KV, outcome.report.to_kv().as_bytes())?,
    );
    manifest.path("data", &data.data_path);
    manifest.path("embeddings", &data.embeddings_path);
    manifest.path("out", &a.out.out);
    if matches!(init, Init::Random) {
        manifest.result("init", "random");
    }
    manifest.config("model", section(&model_config)?);
    manifest.config("finetune", section(&config)?);
    manifest.config("alignment", section(&alignment)?);
    let selected = &outcome.runs[outcome.selected_run];
    manifest.result("selected_run", int(outcome.selected_run));
    manifest.result("best_epoch", int(selected.best_epoch));
    manifest.result("test_macro_wa", outcome.report.macro_wa);
    manifest.result("test_macro_f1", outcome.report.macro_f1);
    manifest.result("test_examples", int(outcome.report.examples()));
    manifest.write(&out, &layers)?;
    Ok(())
}

pub fn eval(a: EvalArgs, command: &'static str) -> Result<(), CliError> {
    let layers = Layers::load(a.config.as_deref())?;
    let alignment: Alignment = layers.resolve("alignment", &Alignment::default())?;
    let mut manifest = Manifest::new(command);
    let (config, weights) = load_checkpoint(&a.model)?;
    if !weights.has_head(EMOTION_HEAD) {
        return Err(CliError::Data(format!(
            "{}: checkpoint has no emotion head; fine-tune it first",
            a.model.display()
        )));
    }
    let data = dataset::load(&a.data.data, a.data.embeddings.as_deref(), &alignment)?;
    let differing = data.input_mismatches(&config, &alignment);
    if !differing.is_empty() {
        return Err(CliError::Data(format!(
            "{}: checkpoint config does not match {} in: {}",
            a.model.display(),
            data.data_path.display(),
            differing.join(", ")
        )));
    }
    let model = Model::new(config, weights)?;
    let report = evaluate(&model, &data.examples, &a.drop.0)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(root) = &a.out {
        let out = OutDir::create(root, &[REPORT_TEXT, REPORT_KV], a.force)?;
        manifest.path("report", &out.write(REPORT_TEXT, text.as_bytes())?);
        manifest.path(
            "report_kv",
            &out.write(REPORT_KV, report.to_kv().as_bytes())?,
        );
        manifest.path("model", &a.model);
        manifest.path("data", &data.data_path);
        manifest.path("embeddings", &data.embeddings_path);
        manifest.path("out", root);
        manifest.config("alignment", section(&alignment)?);
        let drop: Vec<&str> = a.drop.0.iter().map(|m| m.name()).collect();
        manifest.config("drop", Value::try_from(drop).expect("strings serialize"));
        manifest.result("macro_wa", report.macro_wa);
        manifest.result("macro_f1", report.macro_f1);
        manifest.result("examples", int(report.examples()));
        manifest.write(&out, &layers)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultName {
    LayerNormBackward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Coordinates checked per loss.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub k_noise: usize,
    pub examples: usize,
    /// Deliberately broken backward rule, for testing the checker itself.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultName>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 300,
            step: 1e-5,
            tolerance: 1e-4,
            k_noise: 6,
            examples: 2,
            fault: None,
        }
    }
}

/// A few short synthetic utterances shaped for `model`.
fn gradcheck_batch(
    model: &ModelConfig,
    alignment: &Alignment,
    config: &GradcheckConfig,
) -> Result<(Vec<PreparedExample>, Vocabulary), CliError> {
    if model.audio_input_dim % alignment.stack != 0 {
        return Err(CliError::Usage(format!(
            "audio_input_dim {} is not a multiple of the frame stack {}",
            model.audio_input_dim, alignment.stack
        )));
    }
    let synth = SynthConfig {
        seed: config.seed,
        examples: config.examples,
        vocab_size: model.vocab_size,
        templates: 2,
        audio_dim: model.audio_input_dim / alignment.stack,
        visual_dim: model.visual_input_dim,
        text_dim: model.text_embedding_dim,
        min_words: 3,
        max_words: 4,
        min_word_ms: 40.0,
        max_word_ms: 80.0,
        max_gap_ms: 0.0,
        alignment: alignment.clone(),
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&synth)?;
    let mut vocab = Vocabulary::from_embeddings(&corpus.embeddings)?;
    if vocab.len() != model.vocab_size {
        return Err(CliError::Usage(format!(
            "vocab_size {} too small for the gradient-check corpus",
            model.vocab_size
        )));
    }
    vocab.count_unigrams(&corpus.examples);
    let prepared = crossmodal::data::prepare(&corpus.examples, &vocab, alignment)?;
    Ok((prepared, vocab))
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let mut layers = Layers::load(a.config.config.as_deref())?;
    layers.flag("gradcheck", "seed", a.config.seed)?;
    layers.flag("gradcheck", "samples", a.samples)?;
    let config: GradcheckConfig = layers.resolve("gradcheck", &GradcheckConfig::default())?;
    let model: ModelConfig = layers.resolve("model", &ModelConfig::toy())?;
    let alignment: Alignment = layers.resolve("alignment", &Alignment::default())?;
    model.validate()?;
    let mut manifest = Manifest::new("gradcheck");
    manifest.seed(config.seed);

    let (examples, vocab) = gradcheck_batch(&model, &alignment, &config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = ModelWeights::init_pretraining(&model, &mut rng)?;
    let batch = examples
        .into_iter()
        .map(|ex| {
            let plan = MaskingPlan::sample(&ex.id, &ex.spans, model.mask_fraction, &mut rng)?;
            Ok((ex, plan))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let noise = NoiseDistribution::from_counts(vocab.counts())?;
    let candidates = batch
        .iter()
        .map(|(ex, plan)| {
            let targets: Vec<usize> = plan.positions.iter().map(|&p| ex.word_ids[p]).collect();
            noise.candidates(&targets, config.k_noise, &mut rng)
        })
        .collect();
    let fault = config
        .fault
        .map(|FaultName::LayerNormBackward| Fault::LayerNormBackward);

    let mut worst: f64 = 0.0;
    for (name, nce) in [("softmax", None), ("nce", Some((noise, candidates)))] {
        let objective = MlmObjective {
            config: model.clone(),
            batch: batch.clone(),
            nce,
            fault,
        };
        let mut params = weights.params().clone();
        let r = grad_check(
            &objective,
            &mut params,
            config.samples,
            config.step,
            config.seed,
        )?;
        let at = r
            .worst
            .as_ref()
            .map_or("-".to_string(), |(k, i)| format!("{k}[{i}]"));
        println!(
            "{name}\tmax_rel_error={:e}\tchecked={}\tworst={at}",
            r.max_rel_error, r.checked
        );
        manifest.result(&format!("{name}_max_rel_error"), r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    let pass = worst < config.tolerance;
    manifest.result("pass", pass);
    if let Some(root) = &a.out {
        let out = OutDir::create(root, &[MANIFEST], a.force)?;
        manifest.path("out", root);
        manifest.config("model", section(&model)?);
        manifest.config("gradcheck", section(&config)?);
        manifest.config("alignment", section(&alignment)?);
        manifest.write(&out, &layers)?;
    }
    if pass {
        println!("PASS (tolerance {:e})", config.tolerance);
        Ok(())
    } else {
        println!("FAIL (tolerance {:e})", config.tolerance);
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {worst:e} >= {:e}",
            config.tolerance
        )))
    }
}
