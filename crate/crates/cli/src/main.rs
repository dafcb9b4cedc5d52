// SPDX-License-Identifier: MIT OR Apache-2.0

//! `featrace`: command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 for internal
//! failures. Every command writes its outputs, plus a `metadata.json` that
//! hash-pins its inputs, under `--out`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "featrace", version, about = "Train and analyse cross-snapshot crosscoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic snapshot dataset with planted features.
    Synth(SynthArgs),
    /// Train a crosscoder on a snapshot manifest.
    Train(TrainArgs),
    /// Explained variance and L0 of a checkpoint, optionally matched to ground truth.
    Eval(EvalArgs),
    /// Decoder-norm trajectories, classes, projections and dimensionality.
    Evolve(EvolveArgs),
    /// Feature dimensionality at every snapshot.
    Dims(DimsArgs),
    /// Feature attribution on a task and top-k ablation curves.
    Attr(AttrArgs),
    /// Logistic probes for feature firing against decoder norms.
    Probe(ProbeArgs),
    /// Unigram/bigram KL and entropy floors between token corpora.
    Ngram(NgramArgs),
    /// Build a top-activation index and classify features by rule.
    Rules(RulesArgs),
    /// Score feature complexity through a chat-completion endpoint.
    Annotate(AnnotateArgs),
    /// Collect CSV tables from earlier runs and render SVG charts.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthetic config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the dense-to-sparse preset instead of the default config.
    #[arg(long, conflicts_with = "config")]
    pub dense_to_sparse: bool,
    /// JSON task config for the attribution task.
    #[arg(long)]
    pub task_config: Option<PathBuf>,
    /// Skip writing the attribution task.
    #[arg(long, conflicts_with = "task_config")]
    pub no_task: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dictionary size.
    #[arg(long)]
    pub features: Option<usize>,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub omega0: Option<f64>,
    /// Token budget.
    #[arg(long)]
    pub tokens: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Continue from the checkpoint and optimizer state in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Rows from the start of the data; all rows when omitted.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Synthetic ground truth to match decoder directions against.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Lifetime threshold on the rescaled norm.
    #[arg(long, default_value_t = featrace_core::evolution::LIFETIME_THRESHOLD)]
    pub threshold: f64,
    /// Apply the threshold to raw instead of rescaled norms.
    #[arg(long)]
    pub raw_norms: bool,
    /// Features drawn into the trajectory chart.
    #[arg(long, default_value_t = featrace_core::report::MAX_TRAJECTORY_SERIES)]
    pub sample: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DimsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttrArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest the task rows index into.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long, default_value = "ig-patching")]
    pub variant: String,
    #[arg(long, default_value_t = featrace_core::attribution::IG_STEPS)]
    pub n_steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50")]
    pub topk_grid: Vec<usize>,
    /// Snapshot the head reads; defaults to the last.
    #[arg(long)]
    pub snapshot: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated feature ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub features: Vec<usize>,
    /// Rows (tokens) from the start of the data used for probing.
    #[arg(long, default_value_t = 200_000)]
    pub tokens: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NgramArgs {
    /// Reference corpus: `.toks` files or directories of them.
    #[arg(long, value_delimiter = ',', required = true)]
    pub q_tokens: Vec<PathBuf>,
    /// Corpora compared against the reference; one per step when `--steps` is given.
    #[arg(long, value_delimiter = ',', required = true)]
    pub p_tokens: Vec<PathBuf>,
    /// Vocabulary size, or a vocabulary JSON file.
    #[arg(long)]
    pub vocab: String,
    /// Training step of each `--p-tokens` entry; adds a `kl.csv` series.
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<u64>>,
    #[arg(long, default_value_t = featrace_core::ngram::DEFAULT_SMOOTHING)]
    pub smoothing: f64,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RulesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub snapshot: usize,
    /// Samples kept per feature.
    #[arg(long, default_value_t = featrace_core::rules::TOP_SAMPLES)]
    pub k: usize,
    /// Vocabulary JSON; defaults to `vocab.json` next to the manifest.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Verdicts CSV path; the index is written next to it as `index.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Top-activation index (JSON lines).
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Full URL of the chat-completion endpoint.
    #[arg(long)]
    pub endpoint: String,
    #[arg(long)]
    pub model: String,
    /// Environment variable holding a bearer token.
    #[arg(long)]
    pub auth_env: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Only these features; every feature with samples by default.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<usize>>,
    /// Checkpoint used to correlate complexity with peak step.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Annotations JSONL path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories or CSV files from earlier commands.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::run(cli.command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
