//! `moddpo`: synthesize data, train, evaluate, report and verify.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or parse error,
//! 3 missing input or I/O failure, 4 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "moddpo", version, about = "Modality-decoupled preference optimization at desk scale")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true, env = "MODDPO_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the preference dataset, warm-up corpus and evaluation items.
    Synth {
        /// Dotted `section.key=value` overrides.
        overrides: Vec<String>,
    },
    /// Warm up the reference and train one policy.
    Train { overrides: Vec<String> },
    /// Score checkpoints on the evaluation items.
    Eval { overrides: Vec<String> },
    /// Run the oracle audits; nonzero exit on any failure.
    Verify {
        /// Also run the seed-averaged training experiments.
        #[arg(long)]
        experiments: bool,
        overrides: Vec<String>,
    },
    /// Summarize counters and comparisons already on disk.
    Report { overrides: Vec<String> },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Input(String),
    Verification(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<moddpo::Error> for CliError {
    fn from(e: moddpo::Error) -> Self {
        use moddpo::Error as E;
        match e {
            E::Config(_) | E::Parse { .. } => CliError::Config(e.to_string()),
            E::Io { .. } | E::Csv(_) => CliError::Input(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Synth { overrides } => commands::synth(&config::load(file, &overrides)?),
        Command::Train { overrides } => commands::train(&config::load(file, &overrides)?),
        Command::Eval { overrides } => commands::eval(&config::load(file, &overrides)?),
        Command::Verify { experiments, overrides } => {
            let mut cfg = config::load(file, &overrides)?;
            cfg.verify.experiments |= experiments;
            commands::verify(&cfg)
        }
        Command::Report { overrides } => commands::report(&config::load(file, &overrides)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("moddpo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
