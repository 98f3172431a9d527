//! `metricopt`: prepare data, train single cells, run grids and analyze them.
//!
//! Every output is a function of the arguments alone (no timestamps, no
//! nondeterministic ordering), so reruns produce identical files.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use metricopt::RatingFormat;

#[derive(Debug, Parser)]
#[command(
    name = "metricopt",
    version,
    about = "Metric-optimizing matrix factorization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Binarize and filter a ratings file, then write splits with sampled negatives.
    Prepare(PrepareArgs),
    /// Generate a synthetic unary dataset.
    Synth(SynthArgs),
    /// Train one (split, nsr, paradigm, loss) cell.
    Train(TrainArgs),
    /// Run a full grid described by a TOML file.
    Grid(GridArgs),
    /// Build analysis tables from grid results.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Tab-separated `user item [rating]` file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "graded")]
    format: RatingFormat,
    /// Lowest rating counted as positive (graded data).
    #[arg(long, default_value_t = metricopt::dataio::DEFAULT_POSITIVE_THRESHOLD)]
    threshold: u8,
    /// Users with fewer positives are dropped.
    #[arg(long, default_value_t = metricopt::dataio::DEFAULT_MIN_POSITIVES)]
    min_positives: usize,
    #[arg(long, default_value_t = metricopt::dataio::DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of Monte Carlo splits.
    #[arg(long, default_value_t = 3)]
    splits: u32,
    /// Negative sampling ratios, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 5.0])]
    nsr: Vec<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    /// Dimension of the ground-truth factors.
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    #[arg(long, default_value_t = 25)]
    positives: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (unary format).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Split id to train on.
    #[arg(long, default_value_t = 0)]
    split: u32,
    #[arg(long, default_value_t = 1.0)]
    nsr: f64,
    #[arg(long)]
    paradigm: metricopt::Paradigm,
    /// `rr`, `ap`, `ndcg` or `nrbp` (pairwise nRBP also needs `--p`).
    #[arg(long)]
    loss: String,
    #[arg(long)]
    p: Option<f64>,
    /// One rate, or several (comma separated) to search over.
    #[arg(long, value_delimiter = ',', required = true)]
    lr: Vec<f64>,
    #[arg(long, default_value_t = metricopt::trainer::DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = metricopt::trainer::DEFAULT_EVAL_EVERY)]
    eval_every: usize,
    #[arg(long, default_value_t = metricopt::model::DEFAULT_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long, default_value_t = metricopt::model::DEFAULT_INIT_STD)]
    init_std: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Grid spec (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the spec's worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec's number of splits.
    #[arg(long)]
    splits: Option<u32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Reuse finished cells from an earlier run into the same directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// z-scores within (dataset, nsr, eval_metric).
    Standardize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// How often each loss is best per (paradigm, eval_metric).
    Frequency {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean z per loss with bootstrap intervals.
    Summarize {
        /// A standardized table.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = metricopt::experiment::DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = metricopt::experiment::DEFAULT_CONFIDENCE)]
        confidence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-user metric differences between two checkpoints on one split.
    PerUserDiff {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        /// Split file written by `prepare` or `train`.
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        metric: metricopt::MetricKind,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Grid(a) => commands::grid(a),
        Command::Analyze(a) => commands::analyze(a),
    }
}
