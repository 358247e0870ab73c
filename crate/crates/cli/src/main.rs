//! `tsf`: synthesize data, train, track, evaluate, compare and visualize.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;
mod overlay;
mod reference;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsf_core::TsfError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<TsfError> for CliError {
    fn from(e: TsfError) -> Self {
        match e {
            TsfError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            TsfError::Divergence { .. } | TsfError::ModelCorruption(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "tsf", version, about = "Twofold-feature Siamese tracker with template update")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic infrared dataset to disk.
    Synth(SynthArgs),
    /// Train stage 1 (backbone + head) or stage 2 (template update).
    Train(TrainArgs),
    /// Track every sequence of a dataset and write per-sequence result files.
    Track(TrackArgs),
    /// Score result files against a dataset; writes report.json (and plots).
    Eval(EvalArgs),
    /// Tabulate several reports and overlay their curves.
    Compare(CompareArgs),
    /// Draw ground truth and predicted boxes onto frames.
    Overlay(OverlayArgs),
    /// Print the flag and configuration reference as Markdown.
    Reference,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    /// Dataset root directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Layout: vot_tir, gtot or synthetic.
    #[arg(long, default_value = "synthetic")]
    pub kind: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with a [suite] table and/or [[sequence]] entries.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// 1 or 2.
    #[arg(long)]
    pub stage: u8,
    /// Stage-1 checkpoint (required for stage 2).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration; only its [track] table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Baseline: deep features only, templates never updated.
    #[arg(long, group = "ablation")]
    pub no_update: bool,
    /// Twofold features, templates never updated.
    #[arg(long, group = "ablation")]
    pub tsf_only: bool,
    /// Deep features only, with the template update.
    #[arg(long, group = "ablation")]
    pub mu_only: bool,
    /// Sequences tracked in parallel.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Write per-frame template-bank checksums under debug/.
    #[arg(long)]
    pub debug_dump: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with <sequence>.txt result files.
    #[arg(long)]
    pub results: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Tracker name recorded in the report (defaults to the results directory name).
    #[arg(long)]
    pub tracker: Option<String>,
    /// Average curves over sequences instead of pooling frames.
    #[arg(long)]
    pub per_sequence: bool,
    /// Also write SVG success/precision plots.
    #[arg(long)]
    pub plots: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// report.json files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Only this sequence.
    #[arg(long)]
    pub sequence: Option<String>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Track(a) => commands::track(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Overlay(a) => overlay::run(&a),
        Command::Reference => {
            print!("{}", reference::markdown());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tsf: {e}");
            ExitCode::from(e.code())
        }
    }
}
