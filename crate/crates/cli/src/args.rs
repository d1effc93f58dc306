use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "gridflow", version, about = "Physics-informed graph attention for AC power flow")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample, solve and store scenarios of one network.
    Generate(GenerateArgs),
    /// Train a model on one or more datasets.
    Train(TrainArgs),
    /// Report held-out metrics and parity plots.
    Evaluate(EvaluateArgs),
    /// Fine-tune a trained model on a new system with EWC and replay.
    Adapt(AdaptArgs),
    /// Branch importance, correlations and feature attributions.
    Explain(ExplainArgs),
    /// Re-check every stored label against the power-balance equations.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Network case file (JSON).
    #[arg(long)]
    pub case: PathBuf,
    /// Number of scenarios.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    pub max_outages: Option<u8>,
    /// Randomization settings (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Model and training settings (TOML with `[model]` and `[train]` tables).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; history, metrics and config echo are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct AdaptArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub new_data: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub replay_data: Vec<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub replay_ratio: Option<f64>,
    /// Adaptation settings (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Riemann steps for integrated gradients.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    /// Scenarios per system used for integrated gradients.
    #[arg(long, default_value_t = 16)]
    pub ig_scenarios: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Largest accepted power mismatch in per unit.
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
}
