//! `desklm`: data pipeline, curriculum training, VLM training and reports.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 failure while
//! running.

mod commands;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "desklm", version, about = "Desk-scale curriculum LM training")]
struct Cli {
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Line-wise and heuristic filtering of a `{id, lang, text}` JSONL corpus.
    Filter(FilterArgs),
    /// Conversation trees to root-to-leaf threads with repeated messages masked.
    Flatten(FlattenArgs),
    /// Documents to a packed-token shard.
    Pack(PackArgs),
    /// Runs a curriculum plan.
    Train(TrainArgs),
    /// Continues a run from a checkpoint or stop snapshot.
    Resume(ResumeArgs),
    /// Trains the projector (pretrain) or projector and LM (finetune).
    VlmTrain(VlmTrainArgs),
    /// Loss and evaluation CSVs plus a loss plot for a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Directory of rule files overriding the built-in ones.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Removal-rate CSV; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlattenArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Per-source overhead JSON; printed to stdout when absent.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Truncate threads to this many tokens.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Debug, Args)]
struct PackArgs {
    /// JSONL of `{tokens: [..]}` or `{text: ".."}`, optional `source`.
    #[arg(long)]
    input: PathBuf,
    /// Shard directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    context: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML curriculum plan.
    #[arg(long)]
    plan: PathBuf,
    /// Token scale factor, overriding the plan's.
    #[arg(long)]
    scale: Option<f64>,
    /// Overrides the plan's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to a directory under `$DESKLM_CACHE_DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop after this many steps and write a resumable snapshot.
    #[arg(long)]
    stop_after_steps: Option<u64>,
}

#[derive(Debug, Args)]
struct ResumeArgs {
    /// A `ckpt-*` or `snapshot-*` directory inside a run directory.
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    stop_after_steps: Option<u64>,
}

#[derive(Debug, Args)]
struct VlmTrainArgs {
    /// `pretrain` or `finetune`.
    #[arg(long)]
    stage: String,
    /// Previous VLM output directory to continue from.
    #[arg(long, conflicts_with = "llm")]
    from: Option<PathBuf>,
    /// Language model archive or training checkpoint.
    #[arg(long)]
    llm: Option<PathBuf>,
    /// Instruction JSONL; synthetic fixtures when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    steps: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn setup_workers(workers: Option<usize>) -> Result<(), CliError> {
    let Some(n) = workers else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Validation("--workers must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        eprintln!("warning: built without the `parallel` feature; running on one worker");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    setup_workers(cli.workers)?;
    match cli.command {
        Command::Filter(a) => commands::filter(&a),
        Command::Flatten(a) => commands::flatten(&a),
        Command::Pack(a) => commands::pack(&a),
        Command::Train(a) => commands::train(&a),
        Command::Resume(a) => commands::resume(&a),
        Command::VlmTrain(a) => commands::vlm_train(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
