mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "latentwm", version, about = "Latent world model: data, training, planning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key-value config file; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed; re-derives every component seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset with the noisy heuristic policy.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overrides `dataset.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a world model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Goal-reaching success rate of a checkpoint under model-predictive control.
    PlanEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `plan_eval.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Overrides `plan_eval.budget`.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Run one analysis suite and write its CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of training checkpoints (straighten suite).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Latent sequences CSV `sequence,t,z0,z1,...` (straighten suite).
        #[arg(long)]
        latents: Option<PathBuf>,
        /// Probe target.
        #[arg(long, value_enum, default_value_t = ProbeTarget::AgentXy)]
        target: ProbeTarget,
    },
    /// Train and evaluate once per value of one config axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        dataset: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Probe,
    Voe,
    Straighten,
    Stats,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTarget {
    AgentXy,
    Noise,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Lambda,
    Projections,
    Knots,
    EmbedDim,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { common, episodes } => commands::generate(&common, episodes),
        Command::Train { common, dataset } => commands::train(&common, &dataset),
        Command::PlanEval { common, checkpoint, episodes, budget } => {
            commands::plan_eval(&common, &checkpoint, episodes, budget)
        }
        Command::Eval { common, suite, checkpoint, checkpoints, dataset, latents, target } => {
            commands::eval(&common, suite, commands::EvalInputs { checkpoint, checkpoints, dataset, latents, target })
        }
        Command::Sweep { common, axis, values, dataset } => commands::sweep(&common, axis, &values, &dataset),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
