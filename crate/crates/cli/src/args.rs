use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "eaft", version, about = "Entropy-gated fine-tuning experiments on a toy language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model from a JSON config; unset fields take toy-scale defaults.
    Train(TrainArgs),
    /// Run an (objective, seed) grid on the synthetic forgetting benchmark (toy-scale defaults).
    Bench(BenchArgs),
    /// Entropy-probability landscape, quadrant counts and token ranking.
    Analyze(AnalyzeArgs),
    /// Correlation between top-K and exact entropy over a K grid.
    TopkStudy(TopkArgs),
    /// Subgroup cross-entropy curves from captured records.
    Dynamics(DynamicsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EntropyAxisArg {
    /// Full-vocabulary entropy in nats.
    Full,
    /// Normalized top-K entropy.
    Gate,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Token-id JSONL corpus scored with --checkpoint.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Pre-computed token records; skips model scoring.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Joint percentile for the confident-conflict corner.
    #[arg(long, default_value_t = 0.15)]
    pub q: f64,
    /// Top-K size for the entropy gate.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = EntropyAxisArg::Full)]
    pub entropy_axis: EntropyAxisArg,
    /// Quadrant whose tokens are ranked.
    #[arg(long, default_value = "confident-conflict")]
    pub quadrant: String,
    /// Rows in ranking.csv.
    #[arg(long, default_value_t = 50)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct TopkArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Fixed synthetic corpus (V = 4096, 10k tokens) instead of a model.
    #[arg(long)]
    pub synthetic: bool,
    /// Comma-separated K values; defaults to 1,2,5,10,20,50,100,V.
    #[arg(long, value_delimiter = ',')]
    pub k_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DynamicsArgs {
    /// A records JSONL file or a directory of them.
    #[arg(long)]
    pub records: PathBuf,
    /// High-entropy group: entropy >= this (nats).
    #[arg(long, default_value_t = 2.0)]
    pub hi: f64,
    /// Low-entropy group: entropy <= this (nats).
    #[arg(long, default_value_t = 0.5)]
    pub lo: f64,
    #[arg(long)]
    pub out: PathBuf,
}
