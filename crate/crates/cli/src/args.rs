use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use star_core::objective::Objective;

use crate::config::Mechanism;

#[derive(Debug, Parser)]
#[command(name = "star", version, about = "Fine-grained category discovery from coarse labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hierarchical dataset (train/test CSV + manifest).
    Generate(GenerateArgs),
    /// Pretrain and train an encoder, writing a run directory.
    Train(TrainArgs),
    /// Evaluate a run on the test split.
    Eval(EvalArgs),
    /// Write one file of member ids per discovered training cluster.
    ExportClusters(ExportArgs),
    /// Train and evaluate several configs over several seeds.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Coarse categories M.
    #[arg(long, default_value_t = 3)]
    pub coarse: usize,
    /// Fine categories K.
    #[arg(long, default_value_t = 9)]
    pub fine: usize,
    #[arg(long, default_value_t = 250)]
    pub per_fine: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub d_latent: Option<usize>,
    #[arg(long)]
    pub d_in: Option<usize>,
    #[arg(long)]
    pub coarse_sep: Option<f64>,
    #[arg(long)]
    pub fine_sep: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

/// Training hyperparameters settable from the command line. Anything not
/// given falls back to the config file, then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    #[arg(long, value_parser = parse_objective)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Initial value of the trainable base B.
    #[arg(long, conflicts_with = "fix_base")]
    pub base: Option<f64>,
    /// Hold B fixed at this value.
    #[arg(long, value_name = "B")]
    pub fix_base: Option<f64>,
    /// Drop the coarse cross-entropy term during training.
    #[arg(long)]
    pub no_ce: bool,
    /// Drop the KL-space contrastive term.
    #[arg(long)]
    pub no_kl_loss: bool,
    /// Drop the B^{d_KL} weighting of denominators.
    #[arg(long)]
    pub no_kl_weight: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Neighbors per query.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub train_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    match s {
        "down" => Ok(Objective::Down),
        "star" => Ok(Objective::Star),
        "pretrain" | "ce" => Ok(Objective::Pretrain),
        other => Err(format!("unknown objective `{other}` (expected down, star or pretrain)")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `generate` (train.csv, test.csv).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML or JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum WhichCheckpoint {
    Best,
    Final,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory; defaults to the one recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mechanism::Clustering)]
    pub mechanism: Mechanism,
    #[arg(long, value_enum, default_value_t = WhichCheckpoint::Best)]
    pub checkpoint: WhichCheckpoint,
    /// Report path; defaults to `<run>/eval-<mechanism>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the cluster files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Config files, one table row each.
    #[arg(long = "config", required = true)]
    pub configs: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mechanism::Clustering)]
    pub mechanism: Mechanism,
}
