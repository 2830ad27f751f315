//! `dsvio`: simulate datasets, run the dual-stage estimator, evaluate trajectories.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dsvio", version, about = "Dual-stage EKF stereo visual-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    Paper,
    Fifo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Align {
    #[value(name = "4dof")]
    FourDof,
    Se3,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a simulator config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a dataset through the estimator.
    Run(RunArgs),
    /// Compare an estimated trajectory with ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "4dof")]
        align: Align,
        /// Also write per-step errors and NEES as CSV.
        #[arg(long)]
        steps: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "stage1-coupling", value_enum)]
    pub coupling: Option<Switch>,
    #[arg(long, value_enum)]
    pub gating: Option<Switch>,
    #[arg(long = "keyframe-policy", value_enum)]
    pub keyframe_policy: Option<Policy>,
    /// Monte-Carlo runs over consecutive seeds; needs a synthetic dataset.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Regenerate the synthetic dataset with this seed (first seed with --runs).
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSVIO_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config, &out),
        Command::Run(args) => commands::run(&args),
        Command::Eval { est, gt, align, steps } => commands::eval(&est, &gt, align, steps.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
