//! `mmfilter`: generate datasets, train and evaluate differentiable filters, and
//! trace their crossmodal weights.
//!
//! Exit status is 0 on success, 1 for usage and configuration errors and 2 for
//! failures while running.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmfilter::fusion::ArchKind;
use mmfilter::simenv::Task;
use mmfilter::FilterError;

/// An error in the invocation rather than in the work it asked for.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "mmfilter",
    version,
    about = "Differentiable multimodal filters"
)]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset and write it as a DFDS file.
    Generate(GenerateArgs),
    /// Pretrain dynamics and/or measurement models.
    Pretrain {
        #[arg(long, value_enum, default_value_t = Stage::All)]
        stage: Stage,
        #[command(flatten)]
        run: RunArgs,
    },
    /// End-to-end training through the filter.
    Train(RunArgs),
    /// Score checkpoints on a dataset.
    Eval(EvalArgs),
    /// Record crossmodal weights and likelihood grids along one trajectory.
    Trace(TraceArgs),
    /// Train and evaluate every architecture at every blackout level of a config.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value = "push")]
    pub task: Task,
    #[arg(long, default_value_t = 300)]
    pub traj: usize,
    #[arg(long, default_value_t = 120)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub blackout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Dynamics,
    Measurement,
    All,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Experiment config (TOML); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<ArchKind>,
    /// Training dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Start from this checkpoint instead of fresh parameters.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue the interrupted run in --out from its last checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoints to report side by side.
    #[arg(long, num_args = 1..)]
    pub compare: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Also score the static and dead-reckoning baselines.
    #[arg(long)]
    pub baselines: bool,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Trajectory index.
    #[arg(long, default_value_t = 0)]
    pub traj: usize,
    /// Frame for the likelihood grids; defaults to the middle of the trajectory.
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::Generate(a) => commands::generate(&a, jobs),
        Command::Pretrain { stage, run } => {
            if run.resume {
                return Err(UsageError("--resume applies to train only".into()).into());
            }
            commands::pretrain(&run, stage)
        }
        Command::Train(a) => commands::train(&a, jobs),
        Command::Eval(a) => commands::eval(&a, jobs),
        Command::Trace(a) => commands::trace(&a),
        Command::Sweep(a) => commands::sweep(&a, jobs),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<FilterError>(),
                Some(FilterError::Config(_))
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 1 } else { 2 })
        }
    }
}
