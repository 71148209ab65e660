//! The `qqa` pipeline: one subcommand per phase.
//!
//! `prepare` unifies corpora, `predict` runs few-shot LLM extraction,
//! `postprocess` turns n-best lists into runs and `evaluate` scores runs.
//! Prediction and n-best post-processing share the same alignment,
//! post-processing and scoring code.

use std::ffi::OsString;
use std::io::Write;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod manifest;

pub use commands::{EvaluateArgs, PostprocArgs, PostprocessArgs, PredictArgs, PrepareArgs};
pub use manifest::{manifest_path, RunCounters, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Provider(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Provider(_) => EXIT_PROVIDER,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(
    qqa_core::corpus::CorpusError,
    qqa_core::eval::EvalError,
    qqa_core::align::NbestError,
    qqa_core::postproc::ConfigError,
    qqa_core::prompting::PromptError
);

impl From<qqa_core::prompting::ClientError> for CliError {
    fn from(e: qqa_core::prompting::ClientError) -> Self {
        match e {
            qqa_core::prompting::ClientError::Config(_) => CliError::Data(e.to_string()),
            _ => CliError::Provider(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qqa", version, about = "Extractive Quranic QA pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge corpora into one unified JSONL file and print split statistics.
    Prepare(PrepareArgs),
    /// Answer questions with a few-shot prompted LLM and write a run file.
    Predict(PredictArgs),
    /// Turn an extractive model's n-best spans into a run file.
    Postprocess(PostprocessArgs),
    /// Score a run file with pAP@k.
    Evaluate(EvaluateArgs),
}

/// Runs a parsed command. Requested artifacts go to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare(a) => commands::prepare(&a, stdout),
        Command::Predict(a) => commands::predict(&a, stdout),
        Command::Postprocess(a) => commands::postprocess(&a, stdout),
        Command::Evaluate(a) => commands::evaluate(&a, stdout),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
