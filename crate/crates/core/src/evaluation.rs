//! Error metrics, cross-run aggregation and the uncertainty-vs-improvement export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{WindowPair, R_INDEX};
use crate::error::{DvaError, Result};

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(DvaError::contract(format!(
            "mse length mismatch: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(DvaError::contract("mse of empty sequences"));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Mean and sample standard deviation (divisor `n - 1`; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockRunResult {
    pub stock: String,
    pub run: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockSummary {
    pub stock: String,
    pub runs: usize,
    pub mse_mean: f64,
    pub mse_sd_over_runs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// Sorted by ticker.
    pub stocks: Vec<StockSummary>,
    pub mean_mse: f64,
    pub mean_sd: f64,
    pub warnings: Vec<String>,
}

/// Per-stock mean and sample SD over runs, then the mean of those across
/// stocks. Inputs are sorted first so the result is order-independent.
pub fn aggregate(results: &[StockRunResult]) -> Result<AggregateReport> {
    if results.is_empty() {
        return Err(DvaError::contract("aggregate needs at least one result"));
    }
    let mut by_stock: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for r in results {
        if !(r.mse >= 0.0) {
            return Err(DvaError::contract(format!("{} run {}: invalid mse {}", r.stock, r.run, r.mse)));
        }
        by_stock.entry(&r.stock).or_default().push((r.run, r.mse));
    }
    let mut warnings = Vec::new();
    let mut stocks = Vec::with_capacity(by_stock.len());
    for (stock, mut runs) in by_stock {
        runs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let values: Vec<f64> = runs.iter().map(|r| r.1).collect();
        if values.len() == 1 {
            warnings.push(format!("{stock}: single run, SD over runs reported as 0"));
        }
        let (mean, sd) = mean_sd(&values);
        stocks.push(StockSummary {
            stock: stock.to_string(),
            runs: values.len(),
            mse_mean: mean,
            mse_sd_over_runs: sd,
        });
    }
    let k = stocks.len() as f64;
    Ok(AggregateReport {
        mean_mse: stocks.iter().map(|s| s.mse_mean).sum::<f64>() / k,
        mean_sd: stocks.iter().map(|s| s.mse_sd_over_runs).sum::<f64>() / k,
        stocks,
        warnings,
    })
}

/// Repeat the last observed return `t_out` times.
pub fn persistence_baseline(window: &WindowPair, t_out: usize) -> Result<Vec<f64>> {
    let last = window
        .x
        .last()
        .ok_or_else(|| DvaError::contract("empty input window"))?;
    Ok(vec![last[R_INDEX]; t_out])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub stock: String,
    pub sd_before: f64,
    pub pct_mse_change: f64,
}

/// Per stock: SD over runs under `a`, and the percent change in mean MSE
/// going from `a` to `b`. Rows ascend by `sd_before`.
pub fn uncertainty_improvement_export(a: &AggregateReport, b: &AggregateReport) -> Result<Vec<UncertaintyRow>> {
    let names = |r: &AggregateReport| r.stocks.iter().map(|s| s.stock.clone()).collect::<Vec<_>>();
    if names(a) != names(b) {
        return Err(DvaError::contract("reports cover different stock sets"));
    }
    let mut rows: Vec<UncertaintyRow> = a
        .stocks
        .iter()
        .zip(&b.stocks)
        .map(|(sa, sb)| UncertaintyRow {
            stock: sa.stock.clone(),
            sd_before: sa.mse_sd_over_runs,
            pct_mse_change: if sa.mse_mean == 0.0 {
                0.0
            } else {
                100.0 * (sb.mse_mean - sa.mse_mean) / sa.mse_mean
            },
        })
        .collect();
    rows.sort_by(|x, y| x.sd_before.total_cmp(&y.sd_before).then_with(|| x.stock.cmp(&y.stock)));
    Ok(rows)
}

pub fn write_uncertainty_csv(path: &Path, rows: &[UncertaintyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| DvaError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn res(stock: &str, run: usize, mse: f64) -> StockRunResult {
        StockRunResult {
            stock: stock.into(),
            run,
            mse,
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mse(&[0.3, 5.0], &[1.0, -2.0]).unwrap(), mse(&[1.0, -2.0], &[0.3, 5.0]).unwrap());
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(DvaError::Contract(_))));
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(&[res("A", 0, 1.0), res("A", 1, 1.0), res("A", 2, 1.0)]).unwrap();
        assert_eq!((r.mean_mse, r.mean_sd), (1.0, 0.0));

        let r = aggregate(&[res("A", 0, 0.9), res("A", 1, 1.1)]).unwrap();
        assert!((r.mean_mse - 1.0).abs() < 1e-15);
        assert!((r.mean_sd - 0.141_421_356_237_309_5).abs() < 1e-12);

        let r = aggregate(&[res("A", 0, 1.0), res("B", 0, 2.0)]).unwrap();
        assert_eq!(r.mean_mse, 1.5);
        assert_eq!(r.warnings.len(), 2);
    }

    #[test]
    fn aggregate_is_order_independent() {
        let rows = vec![
            res("B", 1, 0.31),
            res("A", 0, 0.7),
            res("B", 0, 0.1),
            res("A", 2, 0.05),
            res("A", 1, 0.2),
        ];
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(aggregate(&rows).unwrap(), aggregate(&rev).unwrap());
    }

    #[test]
    fn persistence_repeats_last_return() {
        let w = WindowPair {
            anchor: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            anchor_index: 1,
            x: vec![[0.0; 6], [1.0, 1.0, 1.0, 0.0, 0.0, 1.003]],
            y: vec![1.0; 3],
        };
        assert_eq!(persistence_baseline(&w, 3).unwrap(), vec![1.003; 3]);
    }

    #[test]
    fn export_examples() {
        let a = aggregate(&[res("A", 0, 1.0), res("A", 1, 1.0), res("B", 0, 2.0), res("B", 1, 2.4)]).unwrap();
        let same = uncertainty_improvement_export(&a, &a).unwrap();
        assert!(same.iter().all(|r| r.pct_mse_change == 0.0));
        assert_eq!(same.len(), 2);
        assert!(same[0].sd_before <= same[1].sd_before);

        let b = aggregate(&[res("A", 0, 0.9), res("B", 0, 2.2)]).unwrap();
        let rows = uncertainty_improvement_export(&a, &b).unwrap();
        let ra = rows.iter().find(|r| r.stock == "A").unwrap();
        assert!((ra.pct_mse_change + 10.0).abs() < 1e-12);

        let c = aggregate(&[res("A", 0, 1.0)]).unwrap();
        assert!(matches!(uncertainty_improvement_export(&a, &c), Err(DvaError::Contract(_))));
    }
}
