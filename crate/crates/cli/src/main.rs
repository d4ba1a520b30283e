//! `cocktail`: merge checkpoints, solve merging weights, score few-shot losses
//! and run the forgetting lab.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "cocktail", version, about = "Merge same-architecture checkpoints by weighted parameter averaging")]
struct Cli {
    /// Cap on worker threads for merging and scoring.
    #[arg(long, global = true, env = "COCKTAIL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge checkpoints into a new checkpoint plus a provenance sidecar.
    Merge(MergeArgs),
    /// Solve merging weights from a loss report or from few-shot examples.
    Weights(WeightsArgs),
    /// Score candidate checkpoints on few-shot examples and emit a loss report.
    Eval(EvalArgs),
    /// Run the forgetting-and-recovery experiment on synthetic tasks.
    Lab(LabArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// alpha * target + (1 - alpha) * sum_i w_i * candidate_i
    General,
    /// alpha * target + (1 - alpha) * base
    Mono,
    /// sum_i w_i * candidate_i, no target
    ZeroShot,
}

#[derive(Debug, Args)]
struct MergeArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Fine-tuned target checkpoint (general, mono).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Base checkpoint (mono).
    #[arg(long)]
    base: Option<PathBuf>,
    /// Candidate checkpoints (general, zero-shot); ids are the file stems.
    #[arg(long, num_args = 1..)]
    candidates: Vec<PathBuf>,
    /// Comma-separated candidate weights, in candidate order.
    #[arg(long, value_delimiter = ',', conflicts_with = "weights_file")]
    weights: Option<Vec<f64>>,
    /// Weight vector JSON as written by `cocktail weights`.
    #[arg(long)]
    weights_file: Option<PathBuf>,
    /// Target share; defaults to 0.5 for general and mono.
    #[arg(long)]
    alpha: Option<f64>,
    /// Output checkpoint; the sidecar goes to <output>.provenance.json.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct WeightsArgs {
    /// Loss report JSON ({"candidates": {id: {"losses": [...]}}}).
    #[arg(long, conflicts_with_all = ["examples", "arch", "candidates"])]
    losses: Option<PathBuf>,
    /// Few-shot example files (JSONL); several require --pool.
    #[arg(long, num_args = 1..)]
    examples: Vec<PathBuf>,
    /// Toy architecture JSON for scoring the candidates.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Candidate checkpoints to score; ids are the file stems.
    #[arg(long, num_args = 1..)]
    candidates: Vec<PathBuf>,
    /// Pool all example files into one unified set.
    #[arg(long)]
    pool: bool,
    /// Softmax temperature.
    #[arg(long, default_value_t = cocktail::solver::DEFAULT_TAU)]
    tau: f64,
    /// Let the target take part in the softmax instead of being dropped.
    #[arg(long)]
    joint: bool,
    /// Id of the target inside a loss report; dropped unless --joint.
    #[arg(long, requires = "losses")]
    target_id: Option<String>,
    /// Target checkpoint, scored alongside the candidates with --joint.
    #[arg(long, requires = "joint", conflicts_with = "losses")]
    target: Option<PathBuf>,
    /// Write the weight vector here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Few-shot example files (JSONL); several require --pool.
    #[arg(long, num_args = 1.., required = true)]
    examples: Vec<PathBuf>,
    #[arg(long)]
    arch: PathBuf,
    /// Checkpoints to score; ids are the file stems.
    #[arg(long, num_args = 1.., required = true)]
    candidates: Vec<PathBuf>,
    #[arg(long)]
    pool: bool,
    /// Write the loss report here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LabArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Named scenario.
    #[arg(long, default_value = "default", conflicts_with = "scenario")]
    preset: String,
    /// Scenario JSON overriding the preset.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Comma-separated α values; defaults to 0, 0.1, ..., 1.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Comma-separated few-shot sizes; defaults to 5 and every held-out row.
    #[arg(long, value_delimiter = ',')]
    examples: Option<Vec<usize>>,
    /// Comma-separated merge modes.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "mono,general")]
    modes: Vec<Mode>,
    #[arg(long, default_value_t = cocktail::solver::DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Accuracy-vs-α plot.
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<(), Failure> {
        if let Some(n) = cli.threads {
            commands::set_threads(n)?;
        }
        match cli.command {
            Command::Merge(args) => commands::merge(args, cli.threads),
            Command::Weights(args) => commands::weights(args),
            Command::Eval(args) => commands::eval(args),
            Command::Lab(args) => commands::lab(args),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
