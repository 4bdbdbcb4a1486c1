//! `blindfill`: synthesize marker corpora, train, evaluate and run inference.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] blindfill::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) | CliError::Failed(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "blindfill",
    version,
    about = "Blind removal of artificial markers from medical images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat TOML file with any of the keys below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

impl Common {
    fn resolve(self) -> Result<RunConfig, CliError> {
        RunConfig::resolve(self.config.as_deref(), self.run)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stub {
    /// Returns the corrupted input unchanged.
    Identity,
    /// Returns the ground-truth clean image.
    Perfect,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stamp markers on clean images: writes corrupted/, mask/ and boxes.jsonl per split.
    Synth(#[command(flatten)] Common),
    /// Train a model into <runs_dir>/<name>/.
    Train(#[command(flatten)] Common),
    /// Score a checkpoint on a split with ground truth.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long, required_unless_present = "stub", conflicts_with = "stub")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a reference restorer instead of a checkpoint.
        #[arg(long, value_enum)]
        stub: Option<Stub>,
        /// Output directory; defaults to <runs_dir>/<name>/eval.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Restore every PNG in a directory.
    Infer {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of input PNGs.
        #[arg(long)]
        input: PathBuf,
        /// Receives one restored PNG per input, under the same name.
        #[arg(long)]
        output: PathBuf,
        /// Also write the predicted mask of each input to <output>/masks/.
        #[arg(long)]
        emit_mask: bool,
        /// Also write detected markers of each input to <output>/boxes.jsonl.
        #[arg(long)]
        emit_detections: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => commands::synth(&c.resolve()?),
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Eval {
            checkpoint,
            stub,
            out,
            common,
        } => commands::eval(&common.resolve()?, checkpoint.as_deref(), stub, out),
        Command::Infer {
            checkpoint,
            input,
            output,
            emit_mask,
            emit_detections,
            common,
        } => commands::infer(
            &common.resolve()?,
            &checkpoint,
            &input,
            &output,
            commands::InferOutputs {
                mask: emit_mask,
                detections: emit_detections,
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
