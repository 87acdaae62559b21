mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use neuroview::cells::{CellKind, InitKind};
use neuroview::interpret::Ranking;
use neuroview::network::HeadKind;
use neuroview::parallel::Execution;

/// Train, evaluate and inspect NeuroView recurrent sequence classifiers.
#[derive(Parser)]
#[command(name = "neuroview", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint, config and loss history.
    Train(TrainArgs),
    /// Train one model per hidden size and keep the best by test accuracy.
    Sweep(SweepArgs),
    /// Report overall and per-class accuracy of a checkpoint.
    Evaluate(EvalArgs),
    /// Export per-class timestep weight maps and the class similarity matrix.
    Inspect(InspectArgs),
    /// Zero the top-k timesteps and report the accuracy for each k.
    Counterfactual(CounterfactualArgs),
    /// Write weight maps, similarity and counterfactual tables for every class.
    Export(ExportArgs),
}

/// Run settings. Flags override the config file; `--seed` overrides
/// `NV_SEED`, which overrides the file.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset name, dataset directory or training file.
    #[arg(long)]
    dataset: Option<String>,
    /// Explicit test file.
    #[arg(long)]
    test: Option<PathBuf>,
    /// rnn, gru or lstm.
    #[arg(long)]
    cell: Option<CellKind>,
    /// nv (NeuroView), last (last hidden state) or avg (pooled hidden states).
    #[arg(long)]
    head: Option<HeadKind>,
    /// Hidden units per cell.
    #[arg(long)]
    hidden: Option<usize>,
    /// Stacked recurrent layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Run a reverse cell alongside each forward cell.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    bidirectional: Option<bool>,
    /// Divide the avg head's sum by the horizon.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mean_pool: Option<bool>,
    /// uniform, orthogonal, identity or normal.
    #[arg(long)]
    init: Option<InitKind>,
    /// Pad or truncate sequences to this many steps (0 keeps the data's length).
    #[arg(long)]
    horizon: Option<usize>,
    /// Z-normalize every series per feature.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    znorm: Option<bool>,
    /// Adam step size.
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size (0 for full batch).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Global gradient-norm clip (0 disables).
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long, env = "NV_SEED")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    execution: Option<ExecArg>,
    /// Directory that receives the run directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Suppress per-epoch progress.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated hidden sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Checkpoint written by `train` or `sweep`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to use instead of the checkpoint's own.
    #[arg(long)]
    dataset: Option<String>,
    /// Explicit test file.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    #[arg(long, value_enum)]
    execution: Option<ExecArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `all` or comma-separated class indices.
    #[arg(long, default_value = "all")]
    classes: String,
    /// Layer whose block ranks the printed timesteps.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Direction (0 forward, 1 reverse) whose block ranks the printed timesteps.
    #[arg(long, default_value_t = 0)]
    direction: usize,
    /// Report directory.
    #[arg(long, default_value = "inspect")]
    output: PathBuf,
}

#[derive(Args)]
struct CounterfactualArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Class whose weight map ranks the timesteps.
    #[arg(long, conflicts_with = "all_classes", required_unless_present = "all_classes")]
    class: Option<usize>,
    /// Zero the union of every class's top-k timesteps.
    #[arg(long)]
    all_classes: bool,
    /// Comma-separated numbers of timesteps to zero.
    #[arg(long, value_delimiter = ',', default_value = "0,1,5,10")]
    k: Vec<usize>,
    /// positive or negative.
    #[arg(long, default_value = "positive")]
    ranking: Ranking,
    /// Zero the classifier weights at the chosen timesteps instead of the inputs.
    #[arg(long)]
    zero_weights: bool,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    direction: usize,
    /// Also write the table to this JSON file.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated numbers of timesteps for the per-class counterfactuals.
    #[arg(long, value_delimiter = ',', default_value = "0,1,5,10")]
    k: Vec<usize>,
    /// positive or negative.
    #[arg(long, default_value = "positive")]
    ranking: Ranking,
    /// Skip the counterfactuals and export the weight maps only.
    #[arg(long)]
    no_counterfactuals: bool,
    /// Report directory.
    #[arg(long, default_value = "export")]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Parallel,
    Sequential,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Parallel => Execution::Parallel,
            ExecArg::Sequential => Execution::Sequential,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a.run),
        Command::Sweep(a) => commands::sweep(&a.run, &a.sizes),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Counterfactual(a) => commands::counterfactual(&a),
        Command::Export(a) => commands::export(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
