//! `cascade-attn`: generate synthetic data, train, evaluate and compare the
//! two-stream classifiers, and check their gradients.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage / configuration / data
//! error, 3 numeric failure (for example a non-finite loss).

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CompareArgs, CountParamsArgs, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cascade_attn::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::CheckFailed(_) => 1,
            Self::Core(cascade_attn::Error::Numeric(_)) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "cascade-attn", version, about = "Two-stream sequence classifiers with cascade attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-stream task (manifests and clip files).
    GenData(GenDataArgs),
    /// Train one architecture.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train all architectures over several seeds and tabulate median results.
    Compare(CompareArgs),
    /// Finite-difference gradient check of every architecture at tiny sizes.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts.
    CountParams(CountParamsArgs),
}

fn set_threads() -> CliResult {
    let Ok(v) = std::env::var("CASCADE_ATTN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("CASCADE_ATTN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))
}

fn run() -> CliResult {
    set_threads()?;
    let args = config::expand_config_args(std::env::args_os().collect())?;
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::CountParams(a) => commands::count_params(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
