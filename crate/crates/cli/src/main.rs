//! `tbn`: train, evaluate and re-rank tree-branch re-identification models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<tbn::Error> for CliError {
    fn from(e: tbn::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tbn", version, about = "Tree-branch person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model, or two in mutual mode.
    Train(TrainArgs),
    /// Extract descriptors from a checkpoint and report CMC/mAP.
    Eval(EvalArgs),
    /// Generate a synthetic market-style dataset.
    Synth(SynthArgs),
    /// Re-rank saved query/gallery embedding files.
    Rerank(RerankArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `trainer.epochs=2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue a single-model run from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root with `query/` and `bounding_box_test/` (overrides `data.root`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `joint`, `local_only`, `global_only` or `all`.
    #[arg(long)]
    pub feature_mode: Option<String>,
    /// Also report metrics after k-reciprocal re-ranking.
    #[arg(long)]
    pub rerank: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output root; split directories must be absent or empty.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with synthetic-spec fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Spec field override, e.g. `num_identities=8`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    /// Query embedding sidecar (`.json`).
    #[arg(long)]
    pub query: PathBuf,
    /// Gallery embedding sidecar (`.json`).
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k1: usize,
    #[arg(long, default_value_t = 6)]
    pub k2: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
    /// `single_query` or `multi_query`.
    #[arg(long, default_value = "single_query")]
    pub protocol: String,
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Rerank(a) => commands::rerank(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                CliError::Validation(_) => "invalid input",
                CliError::Runtime(_) => "error",
            };
            eprintln!("tbn: {kind}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
