use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "near2", version, about = "Train, index, search and evaluate nested text embeddings")]
pub struct Cli {
    /// JSON file with default values for any flag (snake_case keys).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder on relevance records.
    Train(TrainArgs),
    /// Embed titles into a prefix index file.
    Index(IndexArgs),
    /// Query an index at one prefix dimension.
    Search(SearchArgs),
    /// Compute ranking metrics on judged queries.
    Eval(EvalArgs),
    /// Train every schedule and compare against the untrained model.
    Ablate(AblateArgs),
    /// Write a synthetic train/valid/test dataset.
    Synth(SynthArgs),
    /// Histogram of query-title similarity scores.
    Hist(HistArgs),
}

/// Flags shared by `train` and `ablate`.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// Comma-separated nested dimensions, largest first or in any order.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub margin_c: Option<f64>,
    #[arg(long)]
    pub lambda_ocl: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-dimension loss weights, aligned with --dims.
    #[arg(long, value_delimiter = ',')]
    pub dim_weights: Option<Vec<f64>>,
    #[arg(long)]
    pub max_negatives: Option<usize>,
    /// Hash buckets of a freshly initialized encoder.
    #[arg(long)]
    pub buckets: Option<usize>,
    /// Hidden feature width of a freshly initialized encoder.
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Continue training from this model instead of a fresh one.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines training log.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Records file (JSONL or TSV); every distinct title is indexed.
    #[arg(long)]
    pub titles: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Two-stage search, e.g. `64:768`.
    #[arg(long, value_name = "LOW:HIGH")]
    pub funnel: Option<String>,
    #[arg(long)]
    pub shortlist: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub corpus_cap: Option<usize>,
    /// `binary` or `graded`.
    #[arg(long)]
    pub gain: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path; `.csv` writes a table, anything else JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Baseline model; adds relative deltas to the report.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Directory holding train.jsonl, test.jsonl and optionally valid.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated schedule names; all four by default.
    #[arg(long, value_delimiter = ',')]
    pub schedules: Option<Vec<String>>,
    /// Output path; `.csv` writes the delta table, anything else JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub titles_per_query: Option<usize>,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub alphanum: Option<f64>,
    #[arg(long)]
    pub shared_substring: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Prefix dimension; the full dimension by default.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
