//! `amix`: prepare rotation data, train, sweep, plot and report.

mod commands;
mod error;
mod plot;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Overrides;
use error::CliError;

#[derive(Parser)]
#[command(name = "amix", version, about = "Anchored hidden-state mixup for out-of-distribution regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or reuse) the cached train/test split for a config.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train one config over one or more seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Number of consecutive seeds starting at the configured one.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Parallel seed workers (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a beta x lambda x seed grid and write sweep.csv and pivot.csv.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-target test error curves from run records.
    Plot {
        /// Record files or directories of records.
        #[arg(long, num_args = 1.., required = true)]
        records: Vec<PathBuf>,
        /// Output prefix; writes PREFIX.png, PREFIX.csv and PREFIX.json.
        #[arg(long)]
        output: PathBuf,
    },
    /// Summarize records as a markdown table.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare { config, overrides } => commands::prepare(&commands::load_config(&config, &overrides)?),
        Command::Train {
            config,
            seeds,
            workers,
            overrides,
        } => {
            if seeds == 0 {
                return Err(CliError::Config("--seeds must be at least 1".into()));
            }
            let cfg = commands::load_config(&config, &overrides)?;
            commands::train(&cfg, seeds, workers.unwrap_or_else(default_workers))
        }
        Command::Sweep {
            grid,
            workers,
            overrides,
        } => sweep::sweep(&grid, &overrides, workers),
        Command::Plot { records, output } => {
            let recs = commands::read_records(&records)?;
            for p in plot::plot(&recs, &output)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Report { paths, csv } => commands::report(&paths, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("amix: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
