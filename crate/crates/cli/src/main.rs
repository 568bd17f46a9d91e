mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pointcopy::data::{TaskKind, TaskMix};

/// Point-and-copy toy models: data, training, evaluation and analysis.
///
/// Exit codes: 0 success, 2 usage or IO error, 3 numerical failure,
/// 4 config/checkpoint shape mismatch. Set POINTCOPY_LOG=info|debug for logs.
#[derive(Parser, Debug)]
#[command(name = "pointcopy", version)]
struct Cli {
    /// TOML run configuration; defaults are used for anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic grounded traces, filter them and write JSONL.
    GenData(GenDataArgs),
    /// Train a model on a JSONL dataset.
    Train(TrainArgs),
    /// Decode every trace of a dataset and report accuracy.
    Eval(EvalArgs),
    /// Decode one task and print the output and its transcript.
    Decode(DecodeArgs),
    /// Record attention during a decode and write decay/copy metrics as CSV.
    Analyze(AnalyzeArgs),
    /// Locate a described region by attention contrast; prints x0,y0,x1,y1.
    Ground(GroundArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// lookup, compare, count or mixed.
    #[arg(long, default_value = "lookup")]
    tasks: TaskMix,
    /// Number of traces to corrupt before filtering.
    #[arg(long, default_value_t = 0)]
    defects: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Final checkpoint, including optimizer state for resuming.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Metrics log; overrides `paths.metrics`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Seed for parameter initialization.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Mask every pointer logit.
    #[arg(long)]
    no_pointing: bool,
}

/// Where a single task comes from: a dataset line or a fresh synthetic task.
#[derive(Args, Debug)]
struct TaskSource {
    #[arg(long, conflicts_with = "task")]
    data: Option<PathBuf>,
    /// 0-based trace index in `--data`.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value = "lookup")]
    task: TaskKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: TaskSource,
    /// Transcript file; stdout when absent.
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    no_pointing: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: TaskSource,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GroundArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset holding the image.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Description prompt as token names, e.g. "<lookup> <color2>".
    #[arg(long)]
    description: String,
    /// The same prompt with the object removed.
    #[arg(long)]
    baseline: String,
    /// Also write the box to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POINTCOPY_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
