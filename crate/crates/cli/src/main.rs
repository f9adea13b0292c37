//! `clarify`: corpus preparation, clarification data, preference training,
//! gated inference and evaluation for dialogue discourse parsing.

mod artifacts;
mod commands;
mod error;
mod scorers;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::CliError;
use crate::settings::{load_settings, Settings};

#[derive(Parser, Debug)]
#[command(name = "clarify", version, about)]
struct Cli {
    /// Flat TOML settings file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Summary,
    Full,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a dialogue file and write it in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a corpus by dialogue into a seed part (alpha) and the rest.
    Split {
        #[arg(long)]
        seed_out: Option<PathBuf>,
        #[arg(long)]
        rest_out: Option<PathBuf>,
    },
    /// Record the relation each instance's clarification should avoid.
    DeriveAmbiguous {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the clarification-model fine-tuning set from teacher output.
    BuildSft {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample and score clarifications into preference pairs.
    BuildPairs {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a clarifier policy on preference pairs.
    TrainCpo {
        #[arg(long)]
        pairs: PathBuf,
        /// Starting checkpoint; a fresh policy over the pair vocabulary otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Parse every instance with vote gating and clarification.
    Infer {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Score predictions against gold arcs.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value = "summary")]
        format: ReportFormat,
        /// Also write the full report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the training gradient with finite differences.
    Gradcheck {
        /// Check this checkpoint instead of a random toy policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pairs for the check; three toy pairs otherwise.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (recorded, resolved) = match &cli.config {
        Some(path) => {
            let loaded = load_settings(path)?;
            (cli.settings.over(&loaded.raw), cli.settings.over(&loaded.resolved))
        }
        None => (cli.settings.clone(), cli.settings.clone()),
    };
    let ctx = commands::Context {
        recorded,
        settings: resolved,
        force: cli.force,
    };
    commands::dispatch(&ctx, cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
