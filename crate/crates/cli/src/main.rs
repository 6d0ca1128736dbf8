//! `sentinel`: generate synthetic traces, train and evaluate window
//! classifiers, and stream device verdicts.

mod commands;
mod error;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sentinel_core::decision::Aggregation;
use sentinel_core::model::AttentionPattern;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sentinel", version, about = "Syscall-trace behavior classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a generator spec to edit and pass to `gen`.
    InitConfig(InitConfigArgs),
    /// Generate a synthetic labelled dataset.
    Gen(GenArgs),
    /// Train a classifier on a dataset directory.
    Train(TrainArgs),
    /// Score a trained classifier on a dataset directory.
    Eval(EvalArgs),
    /// Classify one trace and stream pooled verdicts as JSON lines.
    #[command(visible_alias = "aggregate")]
    Infer(InferArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct InitConfigArgs {
    #[arg(long)]
    out: PathBuf,
    /// Weight of class-specific transition structure (0 = markers only).
    #[arg(long, default_value_t = 0.1)]
    local_signal: f64,
    /// Mean number of real syscalls between class markers.
    #[arg(long, default_value_t = 600.0)]
    mean_gap: f64,
    #[arg(long, default_value_t = 0.1)]
    gap_jitter: f64,
    #[arg(long, default_value_t = 0.05)]
    nanosleep_rate: f64,
    /// Real syscalls per second.
    #[arg(long, default_value_t = 2000.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Generator spec (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed stored in the spec.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    files_per_class: usize,
    /// Seconds of trace per file.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Syscalls removed before tokenization.
    #[arg(long, value_delimiter = ',', default_value = "nanosleep")]
    filter: Vec<String>,
    /// Fail on malformed trace lines instead of skipping them.
    #[arg(long)]
    strict: bool,
    /// Drop trailing windows that do not fill the context.
    #[arg(long)]
    full_windows: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the checkpoint, vocabulary and reports.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    context: usize,
    /// `dense`, `sliding:w=W,g=G` or `blocksparse:b=B,wb=W,r=R,gb=G,seed=S`.
    #[arg(long, default_value = "dense")]
    pattern: AttentionPattern,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    ffn_mult: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record zero epoch durations so reports are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Vocabulary file; defaults to the one in the model directory.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    trace: PathBuf,
    /// Verdict is malicious when 1 - P(Normal) reaches this value.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// `mean`, `vote` or `weighted:w1,w2,...`.
    #[arg(long, default_value = "mean")]
    agg: Aggregation,
    /// Windows pooled into one verdict.
    #[arg(long, default_value_t = 10)]
    span: usize,
    /// Stacker model (JSON) applied to each pooled vector.
    #[arg(long)]
    stacker: Option<PathBuf>,
    /// Also write the verdicts here; a run manifest is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "nanosleep")]
    filter: Vec<String>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// `args` excludes the program name and is recorded in run manifests.
fn run(cli: Cli, args: &[String]) -> Result<(), CliError> {
    match cli.command {
        Command::InitConfig(a) => commands::init_config(a, args),
        Command::Gen(a) => commands::gen(a, args),
        Command::Train(a) => commands::train(a, args),
        Command::Eval(a) => commands::eval(a, args),
        Command::Infer(a) => commands::infer(a, args),
        Command::Replay(a) => commands::replay(a),
    }
}

fn parse_args(args: &[String]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("sentinel".to_string()).chain(args.iter().cloned()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = parse_args(&args).unwrap_or_else(|e| e.exit());
    match run(cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
