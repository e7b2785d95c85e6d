mod commands;
mod config;
mod output;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Partially oblivious inference experiments: training, leakage plans,
/// model-stealing attacks and homomorphic cost measurements.
#[derive(Parser)]
#[command(name = "poinf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured network and write its weights.
    Train(Common),
    /// Write a leakage plan for one hidden fraction and strategy.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value = "random")]
        strategy: String,
    },
    /// Run the attack grid and write per-run and aggregated CSVs.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Attack these weights instead of training (ignored with retrain).
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Calibrate per-operation costs on this host.
    Bench(Common),
    /// Overhead factors of the configured layers over the p grid.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Use a cost table written by `bench` (first row).
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Render CSVs as aligned tables.
    Report {
        files: Vec<PathBuf>,
        /// Reject files produced under a different config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("POINF_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("POINF_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Plan { common, weights, p, strategy } => commands::plan(&common, &weights, p, &strategy),
        Command::Attack { common, weights } => commands::attack(&common, weights.as_deref()),
        Command::Bench(c) => commands::bench(&c),
        Command::Cost { common, table } => commands::cost(&common, table.as_deref()),
        Command::Report { files, config, seed } => report::report(&files, config.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
