//! `embedforge`: data consolidation, training, pruning, evaluation and the
//! distillation ablation behind one binary.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "embedforge", version, about = "Desk-scale contrastive embedding pipeline")]
struct Cli {
    /// Command-specific JSON config (train plan, model config, ablation config, world config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for commands that sample; overrides the plan seed for `train`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Output directory (a CSV file for `eval` and `sweep-mrl`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic retrieval corpus and matching evaluation tasks.
    Synth(SynthArgs),
    /// Convert raw JSONL records into canonical samples.
    Consolidate(ConsolidateArgs),
    /// Append hard negatives mined with a checkpoint.
    Mine(MineArgs),
    /// Run one training stage from a plan file (`--config`).
    Train(TrainArgs),
    /// Structured pruning by activation norms.
    Prune(PruneArgs),
    /// Score a checkpoint on evaluation tasks.
    Eval(EvalArgs),
    /// Mean task score at several truncation dimensions.
    SweepMrl(SweepArgs),
    /// Parameter count of a model config (`--config`).
    ParamCount,
    /// Teacher → prune → with/without distillation students.
    Ablate(AblateArgs),
    /// Counts by source, format and task type.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Symmetric (clustering-style) samples appended after the retrieval ones.
    #[arg(long, default_value_t = 0)]
    symmetric: usize,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long, default_value_t = 400)]
    docs: usize,
    /// Pairs in each of the STS and pair-classification tasks.
    #[arg(long, default_value_t = 200)]
    pairs: usize,
}

#[derive(Args, Debug)]
struct ConsolidateArgs {
    /// JSONL files, or directories whose `*.jsonl` files are read in name order.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Keep at most this many samples per source.
    #[arg(long)]
    cap: Option<usize>,
    /// Instruction templates keyed by task type.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = embedforge::data::DEFAULT_SKIP_TOP)]
    skip_top: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Continue from a checkpoint directory written by an earlier `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Initial checkpoint; overrides the plan's `init`.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Teacher checkpoint; overrides the plan's `teacher`.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayerChoice {
    Prefix,
    NormChange,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    hidden: usize,
    #[arg(long)]
    mlp: usize,
    #[arg(long)]
    layers: usize,
    /// Canonical JSONL whose texts are sampled for calibration.
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long, default_value_t = embedforge::pruning::DEFAULT_CALIBRATION_SIZE)]
    calibration_size: usize,
    #[arg(long, value_enum, default_value_t = LayerChoice::Prefix)]
    layer_strategy: LayerChoice,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    /// Truncate embeddings to this many leading dimensions.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Print the default ablation config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let g = commands::Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&g, a.samples, a.symmetric, a.queries, a.docs, a.pairs),
        Command::Consolidate(a) => commands::consolidate(&g, &a.input, a.cap, a.templates.as_deref()),
        Command::Mine(a) => commands::mine(&g, &a.data, &a.checkpoint, a.k, a.skip_top),
        Command::Train(a) => commands::train(&g, a.resume.as_deref(), a.init.as_deref(), a.teacher.as_deref()),
        Command::Prune(a) => {
            let strategy = match a.layer_strategy {
                LayerChoice::Prefix => embedforge::pruning::LayerStrategy::Prefix,
                LayerChoice::NormChange => embedforge::pruning::LayerStrategy::NormChange,
            };
            commands::prune(&g, &a.checkpoint, (a.hidden, a.mlp, a.layers), &a.calibration, a.calibration_size, strategy)
        }
        Command::Eval(a) => commands::eval(&g, &a.checkpoint, &a.tasks, a.dim),
        Command::SweepMrl(a) => commands::sweep(&g, &a.checkpoint, &a.tasks, &a.dims),
        Command::ParamCount => commands::param_count(&g),
        Command::Ablate(a) => commands::ablate(&g, a.print_config),
        Command::Stats(a) => commands::stats(&g, &a.data),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
