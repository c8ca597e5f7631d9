//! `cirnn`: generate data, initialize, train, verify, evaluate and compare
//! contracting recurrent models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cirnn::data::Split;

/// Exit status of a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const SOLVER: u8 = 4;
    pub const VERIFICATION: u8 = 5;

    pub fn config(msg: impl Into<String>) -> Self {
        Failure { code: Self::CONFIG, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Failure { code: Self::DATA, message: msg.into() }
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        Failure { code: Self::VERIFICATION, message: msg.into() }
    }
}

impl From<cirnn::Error> for Failure {
    fn from(e: cirnn::Error) -> Self {
        use cirnn::Error::*;
        let code = match &e {
            Config(_) => Failure::CONFIG,
            NonConvergence { .. } | SingularE { .. } | Training(_) => Failure::SOLVER,
            Dimension(_) | Data(_) | UndefinedMetric(_) | Format(_) | Io(_) | Json(_) | Csv(_) => Failure::DATA,
        };
        Failure { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "cirnn", version, about = "Contracting implicit RNNs for system identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `desk` or `full` for generate, `A`-`E` for init and train.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the Chen benchmark and write a dataset manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Sample and project initial weights.
    Init {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest; fixes the input and output dimensions.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train on a dataset and keep the best feasible snapshot.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory written by `init`; a fresh initialization is drawn otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Check a certificate against a model and stress-test contraction.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        certificate: PathBuf,
    },
    /// Simulate a model on one split and write an NSE report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        /// Also report the Lyapunov ratio under this certificate.
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Fold index recorded in the report.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Aggregate evaluation reports into comparison tables.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Glob matching report files, e.g. `runs/*/report.json`.
        #[arg(long)]
        reports: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common } => commands::generate(&common),
        Command::Init { common, data } => commands::init(&common, data),
        Command::Train { common, data, init } => commands::train(&common, data, init),
        Command::Verify { common, model, certificate } => commands::verify(&common, &model, &certificate),
        Command::Eval { common, model, data, split, certificate, fold } => {
            commands::eval(&common, &model, data, split, certificate, fold)
        }
        Command::Compare { common, reports } => commands::compare(&common, &reports),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
