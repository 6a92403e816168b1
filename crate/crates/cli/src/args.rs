use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use crossmodal::data::VisualCode;
use crossmodal::model::Modality;
use crossmodal::pretrain::LossKind;

#[derive(Debug, Parser)]
#[command(
    name = "crossmodal",
    version,
    about = "Cross-modal transformer: synthetic data, masked-LM pre-training, emotion fine-tuning and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal corpus with known ground truth
    Synth(SynthArgs),
    /// Pre-train with the multimodal masked-LM objective
    Pretrain(PretrainArgs),
    /// Fine-tune for multi-label emotion recognition
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint
    Eval(EvalArgs),
    /// Score a fine-tuned checkpoint with modalities zeroed
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of both losses
    Gradcheck(GradcheckArgs),
}

/// Comma-separated modality names; the empty string means none.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DropList(pub Vec<Modality>);

fn parse_drop(s: &str) -> Result<DropList, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            Modality::parse(p)
                .ok_or_else(|| format!("unknown modality {p:?} (audio, visual, text)"))
        })
        .collect::<Result<_, _>>()
        .map(DropList)
}

fn parse_visual_code(s: &str) -> Result<VisualCode, String> {
    match s {
        "linear" => Ok(VisualCode::Linear),
        "conjunctive" => Ok(VisualCode::Conjunctive),
        other => Err(format!(
            "unknown visual code {other:?} (linear, conjunctive)"
        )),
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file with [model], [pretrain], [finetune], [synth], [alignment]
    /// and [gradcheck] sections; flags take precedence over it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory (data.jsonl + embeddings.txt) or a data.jsonl file
    #[arg(long)]
    pub data: PathBuf,
    /// Embeddings file; defaults to embeddings.txt next to the data
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub examples: Option<usize>,
    /// Index of the first example; ranges from the same seed never overlap
    #[arg(long)]
    pub first_example: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Ambiguity pairs: words told apart only by audio
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Pairs told apart only by the visual state
    #[arg(long)]
    pub visual_pairs: Option<usize>,
    #[arg(long, value_parser = parse_visual_code)]
    pub visual_code: Option<VisualCode>,
    /// Omit emotion scores
    #[arg(long)]
    pub unlabeled: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k_noise: Option<usize>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Modalities zeroed during pre-training
    #[arg(long, value_parser = parse_drop)]
    pub drop: Option<DropList>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// `random`, or a pre-trained checkpoint whose encoder is reused
    #[arg(long, default_value = "random")]
    pub init: String,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long, value_parser = parse_drop)]
    pub drop: Option<DropList>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fine-tuned checkpoint
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Alignment settings are read from [alignment]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write report files here
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_parser = parse_drop, default_value = "")]
    pub drop: DropList,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Fine-tuned checkpoint
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Modalities to zero, e.g. `audio,visual`
    #[arg(long, value_parser = parse_drop)]
    pub drop: DropList,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Coordinates checked per loss
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

impl From<AblateArgs> for EvalArgs {
    fn from(a: AblateArgs) -> Self {
        EvalArgs {
            model: a.model,
            data: a.data,
            config: a.config,
            out: a.out,
            force: a.force,
            drop: a.drop,
        }
    }
}
