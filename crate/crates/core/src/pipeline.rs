//! On-disk experiment orchestration behind the `dva` subcommands.
//!
//! Output layout under the root directory:
//!
//! ```text
//! checkpoints/<ticker>/run<r>.json
//! predictions/<ticker>/run<r>.csv        test windows
//! predictions/<ticker>/run<r>.val.csv    validation windows
//! history/<ticker>/run<r>.json
//! metrics.json, report.json, uncertainty.csv
//! backtest.json, weights/run<r>.csv
//! sweep/zeta<z>_eta<e>/..., sweep/summary.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_ohlcv, prepare_stock, StockData, WindowPair};
use crate::error::{DvaError, Result};
use crate::evaluation::{aggregate, mse, persistence_baseline, AggregateReport, StockRunResult, StockSummary};
use crate::portfolio::{backtest, tune_gamma, RunBacktest, StockPredictions};
use crate::synth::{synth_generate, write_truth, UniverseSpec};
use crate::training::{predict, train_stock, windows_mse, Checkpoint, RunHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredSplit {
    Validation,
    Test,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn checkpoint(&self, ticker: &str, run: usize) -> PathBuf {
        self.root.join("checkpoints").join(ticker).join(format!("run{run}.json"))
    }

    pub fn predictions(&self, ticker: &str, run: usize, split: PredSplit) -> PathBuf {
        let name = match split {
            PredSplit::Test => format!("run{run}.csv"),
            PredSplit::Validation => format!("run{run}.val.csv"),
        };
        self.root.join("predictions").join(ticker).join(name)
    }

    pub fn history(&self, ticker: &str, run: usize) -> PathBuf {
        self.root.join("history").join(ticker).join(format!("run{run}.json"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn uncertainty(&self) -> PathBuf {
        self.root.join("uncertainty.csv")
    }

    pub fn backtest(&self) -> PathBuf {
        self.root.join("backtest.json")
    }

    pub fn weights(&self, run: usize) -> PathBuf {
        self.root.join("weights").join(format!("run{run}.csv"))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DvaError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| DvaError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(DvaError::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| DvaError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(DvaError::WouldOverwrite(path.to_path_buf()));
    }
    Ok(())
}

/// Timestamps live in a sidecar so the main artifacts stay byte-stable.
fn write_sidecar(path: &Path, command: &str, elapsed: std::time::Duration) -> Result<()> {
    let meta = serde_json::json!({
        "command": command,
        "finished_at_unix": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "elapsed_seconds": elapsed.as_secs_f64(),
    });
    write_json(&path.with_extension("meta.json"), &meta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredRow {
    pub anchor_date: NaiveDate,
    pub step: usize,
    pub y_hat: f64,
    pub y_true: f64,
}

pub fn write_predictions(path: &Path, windows: &[WindowPair], preds: &[Vec<f64>]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for (win, p) in windows.iter().zip(preds) {
        for (k, (yh, yt)) in p.iter().zip(&win.y).enumerate() {
            w.serialize(PredRow {
                anchor_date: win.anchor,
                step: k + 1,
                y_hat: *yh,
                y_true: *yt,
            })?;
        }
    }
    w.flush().map_err(|e| DvaError::io(path, e))?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredRow>> {
    if !path.exists() {
        return Err(DvaError::MissingArtifact(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(DvaError::from)).collect()
}

/// Group prediction rows into per-anchor `(y_hat, y_true)` sequences.
pub fn group_predictions(ticker: &str, rows: &[PredRow]) -> Result<StockPredictions> {
    let mut by_anchor: BTreeMap<NaiveDate, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_anchor.entry(r.anchor_date).or_default();
        if r.step != e.0.len() + 1 {
            return Err(DvaError::data(format!(
                "{ticker}: anchor {} has out-of-order step {}",
                r.anchor_date, r.step
            )));
        }
        e.0.push(r.y_hat);
        e.1.push(r.y_true);
    }
    Ok(StockPredictions {
        ticker: ticker.to_string(),
        by_anchor,
    })
}

pub fn load_universe(cfg: &RunConfig) -> Result<Vec<StockData>> {
    cfg.ticker_list()?
        .iter()
        .map(|t| {
            let bars = load_ohlcv(&cfg.data_dir.join(format!("{t}.csv")), t)?;
            prepare_stock(t, &bars, cfg.train.t_in, cfg.train.t_out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub ticker: String,
    pub run: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_hash: String,
    pub train_config_hash: String,
    pub config: RunConfig,
    pub runs: usize,
    pub stocks: Vec<StockSummary>,
    pub mean_mse: f64,
    pub mean_sd: f64,
    pub persistence_mean_mse: f64,
    pub partial: bool,
    pub failures: Vec<Failure>,
    pub warnings: Vec<String>,
}

fn persistence_mse(windows: &[WindowPair], t_out: usize) -> Result<f64> {
    let preds = windows
        .iter()
        .map(|w| persistence_baseline(w, t_out))
        .collect::<Result<Vec<_>>>()?;
    Ok(windows_mse(&preds, windows))
}

struct JobOutput {
    ticker: String,
    run: usize,
    test_mse: f64,
}

fn run_job(stock: &StockData, run: usize, cfg: &RunConfig, layout: &Layout) -> Result<JobOutput> {
    let trained = train_stock(&stock.ticker, run, &stock.split, &cfg.train)?;
    let ck = &trained.checkpoint;
    let test = predict(ck, &stock.split.test)?;
    let val = predict(ck, &stock.split.validation)?;
    write_text(&layout.checkpoint(&stock.ticker, run), &ck.to_json()?)?;
    write_predictions(&layout.predictions(&stock.ticker, run, PredSplit::Test), &stock.split.test, &test)?;
    write_predictions(
        &layout.predictions(&stock.ticker, run, PredSplit::Validation),
        &stock.split.validation,
        &val,
    )?;
    write_json::<RunHistory>(&layout.history(&stock.ticker, run), &trained.history)?;
    Ok(JobOutput {
        ticker: stock.ticker.clone(),
        run,
        test_mse: windows_mse(&test, &stock.split.test),
    })
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| DvaError::config(format!("thread pool: {e}")))
}

/// Train every (stock, run) pair, write per-job artifacts and return the
/// merged metrics. A failing job is recorded and the rest continue.
pub fn run_experiment(cfg: &RunConfig, stocks: &[StockData], layout: &Layout, jobs: usize) -> Result<Metrics> {
    cfg.validate()?;
    let grid: Vec<(usize, usize)> = (0..stocks.len())
        .flat_map(|s| (0..cfg.runs).map(move |r| (s, r)))
        .collect();
    let outcomes: Vec<(usize, usize, Result<JobOutput>)> = thread_pool(jobs)?.install(|| {
        grid.par_iter()
            .map(|&(s, r)| (s, r, run_job(&stocks[s], r, cfg, layout)))
            .collect()
    });

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (s, r, out) in outcomes {
        match out {
            Ok(o) => results.push(StockRunResult {
                stock: o.ticker,
                run: o.run,
                mse: o.test_mse,
            }),
            Err(e) => {
                log::warn!("{} run {r} failed: {e}", stocks[s].ticker);
                failures.push(Failure {
                    ticker: stocks[s].ticker.clone(),
                    run: r,
                    error: e.to_string(),
                });
            }
        }
    }
    if results.is_empty() {
        return Err(DvaError::data(format!(
            "every job failed; first error: {}",
            failures.first().map(|f| f.error.as_str()).unwrap_or("none")
        )));
    }
    let report = aggregate(&results)?;
    let pers = stocks
        .iter()
        .map(|s| persistence_mse(&s.split.test, cfg.train.t_out))
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics {
        config_hash: cfg.hash(),
        train_config_hash: cfg.train.hash(),
        config: cfg.clone(),
        runs: cfg.runs,
        stocks: report.stocks,
        mean_mse: report.mean_mse,
        mean_sd: report.mean_sd,
        persistence_mean_mse: pers.iter().sum::<f64>() / pers.len() as f64,
        partial: !failures.is_empty(),
        failures,
        warnings: report.warnings,
    })
}

pub fn cmd_synth(spec_path: &Path, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(spec_path).map_err(|e| DvaError::io(spec_path, e))?;
    let spec: UniverseSpec = serde_json::from_str(&text).map_err(|e| DvaError::config(e.to_string()))?;
    if spec.schema_version != crate::config::SCHEMA_VERSION {
        return Err(DvaError::config(format!(
            "schema_version {} is not supported",
            spec.schema_version
        )));
    }
    if spec.series.is_empty() {
        return Err(DvaError::config("universe has no series"));
    }
    let mut targets = Vec::new();
    for s in &spec.series {
        targets.push(out.join(format!("{}.csv", s.name)));
        targets.push(out.join(format!("{}.truth.csv", s.name)));
    }
    targets.push(out.join("tickers.txt"));
    for t in &targets {
        refuse_overwrite(t, force)?;
    }
    fs::create_dir_all(out).map_err(|e| DvaError::io(out, e))?;
    let mut tickers = String::new();
    for s in &spec.series {
        let series = synth_generate(s)?;
        crate::data::write_ohlcv(&out.join(format!("{}.csv", s.name)), &series.bars)?;
        write_truth(&out.join(format!("{}.truth.csv", s.name)), &series.truth)?;
        tickers.push_str(&s.name);
        tickers.push('\n');
    }
    write_text(&out.join("tickers.txt"), &tickers)?;
    Ok(targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub ticker: String,
    pub feature_rows: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub volume_mean: f64,
    pub volume_std: f64,
}

pub fn cmd_ingest_check(cfg: &RunConfig) -> Result<Vec<IngestSummary>> {
    Ok(load_universe(cfg)?
        .into_iter()
        .map(|s| IngestSummary {
            feature_rows: s.features.len(),
            train: s.split.train.len(),
            validation: s.split.validation.len(),
            test: s.split.test.len(),
            volume_mean: s.volume.mean,
            volume_std: s.volume.std,
            ticker: s.ticker,
        })
        .collect())
}

pub fn cmd_train(cfg: &RunConfig, layout: &Layout, jobs: usize, force: bool) -> Result<Metrics> {
    let started = std::time::Instant::now();
    refuse_overwrite(&layout.metrics(), force)?;
    let stocks = load_universe(cfg)?;
    let metrics = run_experiment(cfg, &stocks, layout, jobs)?;
    write_json(&layout.metrics(), &metrics)?;
    write_sidecar(&layout.metrics(), "train", started.elapsed())?;
    Ok(metrics)
}

/// Regenerate prediction files from stored checkpoints, refusing checkpoints
/// trained under a different configuration.
pub fn cmd_predict(cfg: &RunConfig, layout: &Layout, jobs: usize) -> Result<usize> {
    let stocks = load_universe(cfg)?;
    let expected = cfg.train.hash();
    let grid: Vec<(usize, usize)> = (0..stocks.len())
        .flat_map(|s| (0..cfg.runs).map(move |r| (s, r)))
        .collect();
    let written: Vec<Result<()>> = thread_pool(jobs)?.install(|| {
        grid.par_iter()
            .map(|&(s, r)| {
                let stock = &stocks[s];
                let path = layout.checkpoint(&stock.ticker, r);
                if !path.exists() {
                    return Err(DvaError::MissingArtifact(path));
                }
                let text = fs::read_to_string(&path).map_err(|e| DvaError::io(&path, e))?;
                let ck = Checkpoint::from_json(&text, Some(&expected))?;
                for (split, windows) in [
                    (PredSplit::Test, &stock.split.test),
                    (PredSplit::Validation, &stock.split.validation),
                ] {
                    let preds = predict(&ck, windows)?;
                    write_predictions(&layout.predictions(&stock.ticker, r, split), windows, &preds)?;
                }
                Ok(())
            })
            .collect()
    });
    let n = written.len();
    written.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub results: Vec<StockRunResult>,
    pub aggregate: AggregateReport,
}

/// Test MSE per (stock, run) from the prediction files, aggregated.
pub fn evaluate_predictions(cfg: &RunConfig, layout: &Layout) -> Result<EvaluationReport> {
    let mut results = Vec::new();
    for ticker in cfg.ticker_list()? {
        for run in 0..cfg.runs {
            let rows = read_predictions(&layout.predictions(&ticker, run, PredSplit::Test))?;
            if rows.is_empty() {
                return Err(DvaError::data(format!("{ticker} run {run}: empty prediction file")));
            }
            let yh: Vec<f64> = rows.iter().map(|r| r.y_hat).collect();
            let yt: Vec<f64> = rows.iter().map(|r| r.y_true).collect();
            results.push(StockRunResult {
                stock: ticker.clone(),
                run,
                mse: mse(&yh, &yt)?,
            });
        }
    }
    let aggregate = aggregate(&results)?;
    Ok(EvaluationReport {
        config_hash: cfg.hash(),
        results,
        aggregate,
    })
}

/// Write the report; with `compare` (an earlier report), also the
/// SD-vs-improvement CSV from that report to this one.
pub fn cmd_evaluate(cfg: &RunConfig, layout: &Layout, compare: Option<&Path>) -> Result<EvaluationReport> {
    let report = evaluate_predictions(cfg, layout)?;
    write_json(&layout.report(), &report)?;
    if let Some(path) = compare {
        let before: EvaluationReport = read_json(path)?;
        let rows = crate::evaluation::uncertainty_improvement_export(&before.aggregate, &report.aggregate)?;
        ensure_parent(&layout.uncertainty())?;
        crate::evaluation::write_uncertainty_csv(&layout.uncertainty(), &rows)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub config_hash: String,
    pub tickers: Vec<String>,
    pub regularize: bool,
    pub lambda: f64,
    pub runs: Vec<RunBacktest>,
    pub average_sharpe: f64,
    pub average_equal_weight_sharpe: f64,
}

fn load_split_predictions(tickers: &[String], layout: &Layout, run: usize, split: PredSplit) -> Result<Vec<StockPredictions>> {
    tickers
        .iter()
        .map(|t| group_predictions(t, &read_predictions(&layout.predictions(t, run, split))?))
        .collect()
}

/// Per run: tune risk aversion on validation predictions, then backtest the
/// test predictions. Averages are over periods, then over runs.
pub fn cmd_portfolio(cfg: &RunConfig, layout: &Layout) -> Result<BacktestReport> {
    let tickers = cfg.ticker_list()?;
    let t_out = cfg.train.t_out;
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let val = load_split_predictions(&tickers, layout, run, PredSplit::Validation)?;
        let test = load_split_predictions(&tickers, layout, run, PredSplit::Test)?;
        let gamma = tune_gamma(&val, t_out, &cfg.portfolio)?;
        let bt = backtest(&test, t_out, gamma, &cfg.portfolio)?;
        ensure_parent(&layout.weights(run))?;
        let mut w = csv::Writer::from_path(layout.weights(run))?;
        w.write_record(["period_start", "ticker", "weight"])?;
        for p in &bt.periods {
            for (t, wt) in tickers.iter().zip(&p.weights) {
                w.write_record([p.start.to_string(), t.clone(), wt.to_string()])?;
            }
        }
        w.flush().map_err(|e| DvaError::io(layout.weights(run), e))?;
        runs.push(bt);
    }
    let valid: Vec<&RunBacktest> = runs.iter().filter(|r| !r.periods.is_empty()).collect();
    if valid.is_empty() {
        return Err(DvaError::data("no test period produced a usable Sharpe ratio"));
    }
    let k = valid.len() as f64;
    let report = BacktestReport {
        config_hash: cfg.hash(),
        tickers,
        regularize: cfg.portfolio.regularize,
        lambda: cfg.portfolio.lambda,
        average_sharpe: valid.iter().map(|r| r.average_sharpe).sum::<f64>() / k,
        average_equal_weight_sharpe: valid.iter().map(|r| r.average_equal_weight_sharpe).sum::<f64>() / k,
        runs,
    };
    write_json(&layout.backtest(), &report)?;
    Ok(report)
}

/// `0.1, 0.2, ..., 1.0`.
pub fn default_sweep_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub zeta: f64,
    pub eta: f64,
    pub mean_mse: f64,
    pub mean_sd: f64,
    pub partial: bool,
}

/// One training sub-run per `(zeta, eta)` cell under `sweep/`, plus a summary table.
pub fn cmd_sweep(
    cfg: &RunConfig,
    layout: &Layout,
    zetas: &[f64],
    etas: &[f64],
    jobs: usize,
    force: bool,
) -> Result<Vec<SweepRow>> {
    if zetas.is_empty() || etas.is_empty() {
        return Err(DvaError::config("sweep grid must not be empty"));
    }
    let summary = layout.root.join("sweep").join("summary.csv");
    refuse_overwrite(&summary, force)?;
    let stocks = load_universe(cfg)?;
    let mut rows = Vec::new();
    for &zeta in zetas {
        for &eta in etas {
            let mut cell = cfg.clone();
            cell.train.zeta = zeta;
            cell.train.eta = eta;
            let sub = Layout::new(layout.root.join("sweep").join(format!("zeta{zeta}_eta{eta}")));
            let m = run_experiment(&cell, &stocks, &sub, jobs)?;
            write_json(&sub.metrics(), &m)?;
            rows.push(SweepRow {
                zeta,
                eta,
                mean_mse: m.mean_mse,
                mean_sd: m.mean_sd,
                partial: m.partial,
            });
        }
    }
    ensure_parent(&summary)?;
    let mut w = csv::Writer::from_path(&summary)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| DvaError::io(&summary, e))?;
    Ok(rows)
}
