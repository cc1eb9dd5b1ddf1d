//! `cfens`: ingest rating data, run experiment grids, time ensembles and
//! inspect model archives.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfens", version, about = "Collaborative-filtering ensemble benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Clone, Default)]
pub struct GlobalArgs {
    /// Default learner seed (ingest: unused; bench: split and learner seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output file (ingest) or directory (run, bench).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// ingest: input format (ml100k, ml1m, csv). run/bench/inspect: csv, json or both.
    #[arg(long, global = true)]
    pub format: Option<String>,
    /// Also run the `[extended]` experiment of a run file.
    #[arg(long, global = true)]
    pub extended: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a rating file to the canonical CSV plus a summary.
    Ingest {
        input: PathBuf,
    },
    /// Run the experiment grid of a TOML run file.
    Run {
        config: PathBuf,
        /// Archive every model fitted on the first split.
        #[arg(long)]
        save_models: bool,
    },
    /// Time randomness-injection ensembles over a K range, and optionally
    /// the cost/accuracy frontier of a run file's models.
    Bench(commands::BenchArgs),
    /// Describe a model archive.
    Inspect {
        archive: PathBuf,
    },
}

/// A failed command and its exit code.
pub enum Failure {
    /// Bad flags or configuration: exit 2.
    Usage(anyhow::Error),
    /// Anything that went wrong while doing the work: exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    fn report(self) -> ExitCode {
        let (code, err) = match self {
            Failure::Usage(e) => (2, e),
            Failure::Runtime(e) => (1, e),
        };
        eprintln!("error: {err:#}");
        ExitCode::from(code)
    }
}

pub fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

pub fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.global.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .format_timestamp(None)
        .init();
    let g = cli.global;
    let outcome = match cli.command {
        Command::Ingest { input } => commands::ingest(&input, &g),
        Command::Run { config, save_models } => commands::run(&config, save_models, &g),
        Command::Bench(args) => commands::bench(&args, &g),
        Command::Inspect { archive } => commands::inspect(&archive, &g),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
