use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dva_core::config::RunConfig;
use dva_core::pipeline::{self, Layout};
use dva_core::{DvaError, Result};

/// Diffusion-augmented VAE return forecaster and portfolio backtester.
#[derive(Parser)]
#[command(name = "dva", version)]
struct Cli {
    /// Override the training seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel (stock, run) jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Output root; defaults to the config's out_dir, then $DVA_OUT, then ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic OHLCV universe with truth sidecars.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Load, featurize and split every ticker; print a summary.
    IngestCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train all (stock, run) models and write checkpoints, predictions and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rewrite prediction files from stored checkpoints.
    Predict {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate test MSE into report.json.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Earlier report.json to compare against (writes uncertainty.csv).
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Tune risk aversion on validation predictions and backtest the test span.
    Portfolio {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train over a (zeta, eta) grid; defaults to 0.1..=1.0 in steps of 0.1.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        zeta: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        eta: Vec<f64>,
    },
}

fn load(cli: &Cli, path: &Path) -> Result<(RunConfig, Layout)> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let root = cli.out.clone().unwrap_or_else(|| cfg.output_root());
    Ok((cfg, Layout::new(root)))
}

fn print<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    // a closed pipe on stdout is not a failure of the command
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { spec } => {
            let out = cli
                .out
                .clone()
                .or_else(|| std::env::var_os("DVA_OUT").map(PathBuf::from))
                .ok_or_else(|| DvaError::config("synth needs --out or DVA_OUT"))?;
            let files = pipeline::cmd_synth(spec, &out, cli.force)?;
            print(&files)
        }
        Command::IngestCheck { config } => {
            let (cfg, _) = load(cli, config)?;
            print(&pipeline::cmd_ingest_check(&cfg)?)
        }
        Command::Train { config } => {
            let (cfg, layout) = load(cli, config)?;
            let m = pipeline::cmd_train(&cfg, &layout, cli.jobs, cli.force)?;
            print(&serde_json::json!({
                "metrics": layout.metrics(),
                "mean_mse": m.mean_mse,
                "mean_sd": m.mean_sd,
                "partial": m.partial,
            }))
        }
        Command::Predict { config } => {
            let (cfg, layout) = load(cli, config)?;
            let n = pipeline::cmd_predict(&cfg, &layout, cli.jobs)?;
            print(&serde_json::json!({ "models": n }))
        }
        Command::Evaluate { config, compare } => {
            let (cfg, layout) = load(cli, config)?;
            let r = pipeline::cmd_evaluate(&cfg, &layout, compare.as_deref())?;
            print(&r.aggregate)
        }
        Command::Portfolio { config } => {
            let (cfg, layout) = load(cli, config)?;
            let r = pipeline::cmd_portfolio(&cfg, &layout)?;
            print(&serde_json::json!({
                "backtest": layout.backtest(),
                "average_sharpe": r.average_sharpe,
                "average_equal_weight_sharpe": r.average_equal_weight_sharpe,
            }))
        }
        Command::Sweep { config, zeta, eta } => {
            let (cfg, layout) = load(cli, config)?;
            let grid = |v: &Vec<f64>| {
                if v.is_empty() {
                    pipeline::default_sweep_grid()
                } else {
                    v.clone()
                }
            };
            let rows = pipeline::cmd_sweep(&cfg, &layout, &grid(zeta), &grid(eta), cli.jobs, cli.force)?;
            print(&serde_json::json!({ "cells": rows.len() }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
