use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rcldt_core::backbone::ConditioningMode;
use rcldt_core::classifier::{ScoringSpace, TStrategy};
use rcldt_core::Precision;

/// Representation-conditioned diffusion transformer: pretraining,
/// fine-tuning, Diffusion Classifier Zero, sampling and evaluation.
#[derive(Debug, Parser)]
#[command(name = "rcldt", version)]
pub struct Cli {
    /// Worker threads for classification.
    #[arg(long, global = true, env = "RCLDT_THREADS", default_value_t = 1)]
    pub threads: usize,

    /// Where to write the run manifest (defaults next to the main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic blob-detection dataset.
    Synth(SynthArgs),
    /// Train a fresh model on unlabeled images.
    Pretrain(PretrainArgs),
    /// Swap in class conditioning and train on labeled images.
    Finetune(FinetuneArgs),
    /// Classify a labeled set with Diffusion Classifier Zero and report metrics.
    Classify(ClassifyArgs),
    /// Draw samples with ancestral sampling.
    Generate(GenerateArgs),
    /// Noise real images to `t_start` and denoise them back.
    Reconstruct(ReconstructArgs),
    /// Grid of clean-latent predictions across timesteps for one image.
    #[command(name = "sweep-z0")]
    SweepZ0(SweepArgs),
    /// Fréchet distance between encoder features of two image folders.
    #[command(name = "eval-frechet")]
    EvalFrechet(FrechetArgs),
}

/// JSON file with `model`, `schedule`, `train` and `classifier` sections.
#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub loss_log_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings as JSON; defaults are used when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mode: Option<ConditioningMode>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Folder with PGM images and `labels.csv`.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional labeled validation folder, scored after every epoch.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub freeze_blocks: Option<usize>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Monte Carlo pairs per sample.
    #[arg(long)]
    pub mc: Option<usize>,
    #[arg(long)]
    pub t_strategy: Option<TStrategy>,
    /// Comma-separated timesteps for the fixed-list strategy.
    #[arg(long, value_delimiter = ',')]
    pub t_values: Option<Vec<usize>>,
    #[arg(long)]
    pub space: Option<ScoringSpace>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub independent_pairs: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub positive_class: usize,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class id for class-conditioned checkpoints.
    #[arg(long)]
    pub class: Option<usize>,
    /// Images whose representations condition a representation checkpoint.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub t_start: usize,
    /// Use only the first `n` images.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Which image of the folder (sorted by name).
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_delimiter = ',', default_value = "100,200,300,400,500,600,700,800,900")]
    pub t: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FrechetArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub fake: PathBuf,
    /// JSON report path; the result is also printed.
    #[arg(long)]
    pub report: Option<PathBuf>,
}
