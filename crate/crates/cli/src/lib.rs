//! Pipeline commands: synthesize data, train per-scale models, predict,
//! evaluate, sweep label thresholds, export the knowledge space and render
//! per-slide reports.

pub mod commands;
pub mod parse;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::parse::ThresholdArg;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BAGS_FILE: &str = "bags.jsonl";
pub const INSTANCES_FILE: &str = "instances.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "histokind",
    about = "Multi-scale histological feature voting and knowledge-space subtype classification",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a codebook.
    Synth(SynthArgs),
    /// Train one bag classifier per scale on a dataset's instance vectors.
    Train(TrainArgs),
    /// Predict subtypes: forward bags through checkpoints (or take external
    /// bag probabilities), vote, and classify in the knowledge space.
    Predict(PredictArgs),
    /// Score a diagnosis file against a manifest.
    Evaluate(EvaluateArgs),
    /// Recompute accuracy across a grid of label thresholds, per scale.
    Sweep(SweepArgs),
    /// Dump knowledge points and predictions as CSV for 3D plotting.
    ExportSpace(ExportSpaceArgs),
    /// Render one slide's diagnosis as a human-readable report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Codebook file to draw knowledge rows from.
    #[arg(long)]
    pub codebook: PathBuf,
    /// Output directory for manifest.jsonl, bags.jsonl and instances.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub slides_per_subtype: usize,
    /// Per-subtype overrides, e.g. `BCC=60,SCC=55,BD=30`.
    #[arg(long)]
    pub counts: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub bags: usize,
    #[arg(long, default_value_t = 8)]
    pub instances: usize,
    /// Instance feature width Q.
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Probability that an emitted bag probability flips across 0.5.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Spread of emitted probabilities around 0 or 1.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory receiving scale1.json, scale2.json and scale3.json.
    #[arg(long)]
    pub checkpoint_dir: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Encoder output width D.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Base seed; the model for scale s is initialized from seed + s.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub codebook: PathBuf,
    /// Diagnosis output file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory; requires --dataset for the instance vectors.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Dataset directory with instances.jsonl (checkpoint mode).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Externally produced bag-probability file (JSON lines); bypasses the
    /// checkpoints entirely.
    #[arg(long)]
    pub bags: Option<PathBuf>,
    /// Label threshold: a bare value for all scales or `s=value` per scale;
    /// repeatable, defaults to 0.5 everywhere.
    #[arg(long = "threshold", value_parser = parse::parse_threshold)]
    pub thresholds: Vec<ThresholdArg>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Diagnosis file produced by `predict`.
    #[arg(long)]
    pub diagnoses: PathBuf,
    /// Manifest file; defaults to manifest.jsonl inside --dataset.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Metric report output (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict scoring to one split.
    #[arg(long, value_enum, default_value_t = SplitFilter::All)]
    pub split: SplitFilter,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub codebook: PathBuf,
    /// Bag-probability file; defaults to bags.jsonl inside --dataset.
    #[arg(long)]
    pub bags: Option<PathBuf>,
    /// Manifest file; defaults to manifest.jsonl inside --dataset.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Accuracy-vs-threshold CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Threshold grid: `start:end:step` or comma-separated values.
    /// Defaults to 0.1..0.9 in steps of 0.1.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitFilter::All)]
    pub split: SplitFilter,
}

#[derive(Debug, Args)]
pub struct ExportSpaceArgs {
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long)]
    pub diagnoses: PathBuf,
    /// Manifest supplying true labels for the prediction rows.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub diagnoses: PathBuf,
    /// Slide to report on.
    #[arg(long)]
    pub slide: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitFilter {
    All,
    Train,
    Test,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(args) => commands::cmd_synth(&args),
        Command::Train(args) => commands::cmd_train(&args),
        Command::Predict(args) => commands::cmd_predict(&args),
        Command::Evaluate(args) => commands::cmd_evaluate(&args).map(|_| ()),
        Command::Sweep(args) => commands::cmd_sweep(&args),
        Command::ExportSpace(args) => commands::cmd_export_space(&args),
        Command::Report(args) => commands::cmd_report(&args).map(|report| println!("{report}")),
    }
}
