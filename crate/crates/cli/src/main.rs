use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod manifest;

/// Failures split by exit code: 2 for invalid input or configuration, 3 for
/// filesystem problems.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl From<intentkd::Error> for CliError {
    fn from(e: intentkd::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "intentkd", version, about = "Intent encoders: pre-train, distill, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bilingual intent corpus.
    GenData(commands::GenDataArgs),
    /// Train a teacher encoder on labeled data.
    Pretrain(commands::PretrainArgs),
    /// Distill a teacher into a student over parallel text.
    Distill(commands::DistillArgs),
    /// N-shot episodic evaluation of a checkpoint.
    EvalNshot(commands::EvalArgs),
    /// Isotropy report, optionally against a second checkpoint.
    Isotropy(commands::IsotropyArgs),
    /// Export embeddings and a 2-D projection as CSV.
    Embed(commands::EmbedArgs),
}

/// Common output argument.
#[derive(clap::Args, Debug)]
pub struct OutDir {
    /// Output directory; created if missing.
    #[arg(long, short)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Distill(a) => commands::distill(a),
        Command::EvalNshot(a) => commands::eval_nshot(a),
        Command::Isotropy(a) => commands::isotropy(a),
        Command::Embed(a) => commands::embed(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
