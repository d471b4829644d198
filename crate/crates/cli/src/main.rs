//! `mqf2`: synthesize data, train, forecast, score and check models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 input/output error.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::Value;

use config::{parse_assignment, RunConfig};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "mqf2", version, about = "Multivariate quantile function forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Training objective: energy score or maximum likelihood.
    #[arg(long, global = true, value_parser = ["es", "ml"])]
    mode: Option<String>,

    /// Sample paths per series.
    #[arg(long, global = true, value_name = "S")]
    samples: Option<usize>,

    /// Override any configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_assignment)]
    overrides: Vec<(String, Value)>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the Gaussian-process dataset and its true correlation matrix.
    Synth {
        #[arg(long)]
        num_series: Option<usize>,
    },
    /// Train a model and write its checkpoint and per-epoch losses.
    Train {
        /// Where to write the checkpoint (default `<out>/model.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample forecast paths for the final horizon of every series.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use independent Gaussian marginals instead of a model.
        #[arg(long)]
        baseline: bool,
        /// Forecast CSV to write.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a forecast CSV against the held-out horizon.
    Evaluate {
        #[arg(long)]
        forecasts: Option<PathBuf>,
        /// True correlation matrix CSV; taken from the generator settings of
        /// synthetic data when absent.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Verify monotonicity, invertibility and the inverse Jacobian of a checkpoint.
    Check {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize the artifacts in the output directory.
    Report,
}

impl Cli {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        if let Some(s) = self.seed {
            out.push(("seed".to_string(), Value::from(s)));
        }
        if let Some(d) = &self.out {
            out.push(("out".to_string(), Value::from(d.display().to_string())));
        }
        if let Some(m) = &self.mode {
            out.push(("train.mode".to_string(), Value::from(m.as_str())));
        }
        if let Some(s) = self.samples {
            out.push(("samples".to_string(), Value::from(s)));
        }
        if let Command::Synth { num_series: Some(k) } = self.command {
            out.push(("gp.num_series".to_string(), Value::from(k)));
        }
        out.extend(self.overrides.iter().cloned());
        out
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("MQF2_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t >= 1)
        .ok_or_else(|| CliError::Config(format!("MQF2_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides())?;
    match cli.command {
        Command::Synth { .. } => commands::synth(&config),
        Command::Train { checkpoint } => commands::train(&config, checkpoint),
        Command::Predict { checkpoint, baseline, output } => commands::predict(&config, checkpoint, output, baseline),
        Command::Evaluate { forecasts, truth } => commands::evaluate(&config, forecasts, truth),
        Command::Check { checkpoint } => commands::check(&config, checkpoint),
        Command::Report => commands::report(&config),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
