//! Prediction moments, sparse precision estimation, long-only mean-variance
//! weights and the Sharpe backtest.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DvaError, Result};

pub const GLASSO_JITTER: f64 = 1e-8;
pub const GLASSO_TOL: f64 = 1e-7;
pub const GLASSO_MAX_SWEEPS: usize = 200;
pub const QP_TOL: f64 = 1e-8;
pub const QP_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodMoments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Moments of net predicted returns: per-stock time means and the
/// cross-stock sample covariance over the `T'` steps (divisor `T' - 1`).
pub fn prediction_moments(preds: &[Vec<f64>]) -> Result<PeriodMoments> {
    let s = preds.len();
    if s == 0 {
        return Err(DvaError::contract("no prediction sequences"));
    }
    let t = preds[0].len();
    if t < 2 {
        return Err(DvaError::contract("covariance needs sequences of length >= 2"));
    }
    if preds.iter().any(|p| p.len() != t) {
        return Err(DvaError::contract("prediction sequences differ in length"));
    }
    let net = DMatrix::from_fn(s, t, |i, j| preds[i][j] - 1.0);
    let mu = DVector::from_fn(s, |i, _| net.row(i).sum() / t as f64);
    let centered = DMatrix::from_fn(s, t, |i, j| net[(i, j)] - mu[i]);
    let mut sigma = &centered * centered.transpose() / (t - 1) as f64;
    // exact symmetry regardless of summation order
    for i in 0..s {
        for j in 0..i {
            sigma[(i, j)] = sigma[(j, i)];
        }
    }
    Ok(PeriodMoments { mu, sigma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Precision {
    pub theta: DMatrix<f64>,
    /// Covariance estimate `theta^-1` maintained by the solver.
    pub covariance: DMatrix<f64>,
    pub lambda: f64,
    pub sweeps: usize,
    pub kkt_residual: f64,
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Stationarity residual of `log det T - tr(S T) - lambda * sum_{i != j} |T_ij|`
/// at `theta`; `s` is the (jittered) covariance the problem was posed on.
pub fn glasso_kkt_residual(s: &DMatrix<f64>, theta: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let w = theta
        .clone()
        .try_inverse()
        .ok_or_else(|| DvaError::contract("precision matrix is singular"))?;
    let n = s.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = w[(i, j)] - s[(i, j)];
            let r = if i == j {
                g.abs()
            } else if theta[(i, j)] != 0.0 {
                (g - lambda * theta[(i, j)].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Block coordinate descent on the covariance estimate, one lasso solve per
/// row/column; the diagonal is not penalized.
pub fn graphical_lasso(sigma: &DMatrix<f64>, lambda: f64) -> Result<Precision> {
    let p = sigma.nrows();
    if p == 0 || sigma.ncols() != p {
        return Err(DvaError::contract("covariance must be a non-empty square matrix"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(DvaError::contract(format!("lambda {lambda} must be >= 0")));
    }
    for i in 0..p {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * (1.0 + sigma[(i, j)].abs()) {
                return Err(DvaError::contract("covariance is not symmetric"));
            }
        }
    }
    let mut s = sigma.clone();
    for i in 0..p {
        s[(i, i)] += GLASSO_JITTER;
        if !(s[(i, i)] > 0.0) {
            return Err(DvaError::contract("covariance diagonal must be positive"));
        }
    }

    let mut w = s.clone();
    let mut betas = vec![DVector::<f64>::zeros(p.saturating_sub(1)); p];
    let mut sweeps = 0;
    let mut converged = p == 1;
    while !converged && sweeps < GLASSO_MAX_SWEEPS {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let idx: Vec<usize> = (0..p).filter(|&k| k != j).collect();
            let w11 = DMatrix::from_fn(p - 1, p - 1, |a, b| w[(idx[a], idx[b])]);
            let s12 = DVector::from_fn(p - 1, |a, _| s[(idx[a], j)]);
            let beta = &mut betas[j];
            for _ in 0..10_000 {
                let mut delta: f64 = 0.0;
                for k in 0..p - 1 {
                    let mut r = s12[k];
                    for l in 0..p - 1 {
                        if l != k {
                            r -= w11[(k, l)] * beta[l];
                        }
                    }
                    let nb = soft(r, lambda) / w11[(k, k)];
                    delta = delta.max((nb - beta[k]).abs());
                    beta[k] = nb;
                }
                if delta < 1e-12 {
                    break;
                }
            }
            let w12 = &w11 * &*beta;
            for (a, &k) in idx.iter().enumerate() {
                max_change = max_change.max((w[(k, j)] - w12[a]).abs());
                w[(k, j)] = w12[a];
                w[(j, k)] = w12[a];
            }
        }
        converged = max_change < GLASSO_TOL;
    }

    let mut theta = DMatrix::zeros(p, p);
    for j in 0..p {
        let idx: Vec<usize> = (0..p).filter(|&k| k != j).collect();
        let beta = &betas[j];
        let w12: f64 = idx.iter().enumerate().map(|(a, &k)| w[(k, j)] * beta[a]).sum();
        let t22 = 1.0 / (w[(j, j)] - w12);
        theta[(j, j)] = t22;
        for (a, &k) in idx.iter().enumerate() {
            theta[(k, j)] = -beta[a] * t22;
        }
    }
    // average the two estimates of each off-diagonal entry, keeping exact zeros
    for i in 0..p {
        for j in 0..i {
            let (a, b) = (theta[(i, j)], theta[(j, i)]);
            let v = if a == 0.0 || b == 0.0 { 0.0 } else { 0.5 * (a + b) };
            theta[(i, j)] = v;
            theta[(j, i)] = v;
        }
    }
    let kkt = glasso_kkt_residual(&s, &theta, lambda)?;
    if !converged && kkt > 1e-6 {
        return Err(DvaError::NonConvergence {
            solver: "graphical_lasso".into(),
            residual: kkt,
        });
    }
    Ok(Precision {
        theta,
        covariance: w,
        lambda,
        sweeps,
        kkt_residual: kkt,
    })
}

/// Euclidean projection onto `{w : w >= 0, sum w = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// `w' mu - (gamma / 2) w' Sigma w`.
pub fn mv_objective(w: &[f64], mu: &DVector<f64>, sigma: &DMatrix<f64>, gamma: f64) -> f64 {
    let wv = DVector::from_column_slice(w);
    mu.dot(&wv) - 0.5 * gamma * (wv.transpose() * sigma * &wv)[(0, 0)]
}

/// Long-only, fully invested mean-variance weights by projected gradient
/// ascent from equal weights with step `1 / (gamma * ||Sigma||_2)`.
pub fn mean_variance_weights(mu: &DVector<f64>, sigma: &DMatrix<f64>, gamma: f64) -> Result<Vec<f64>> {
    let s = mu.len();
    if s == 0 || sigma.nrows() != s || sigma.ncols() != s {
        return Err(DvaError::contract("mu and Sigma dimensions disagree"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(DvaError::contract(format!("risk aversion {gamma} must be positive")));
    }
    if !mu.iter().chain(sigma.iter()).all(|v| v.is_finite()) {
        return Err(DvaError::contract("non-finite moments"));
    }
    let norm = sigma.clone().symmetric_eigenvalues().amax();
    if norm == 0.0 {
        // linear objective: split evenly across the best expected returns
        let best = mu.max();
        let top: Vec<bool> = mu.iter().map(|&m| m == best).collect();
        let k = top.iter().filter(|&&t| t).count() as f64;
        return Ok(top.iter().map(|&t| if t { 1.0 / k } else { 0.0 }).collect());
    }
    let step = 1.0 / (gamma * norm);
    let mut w = vec![1.0 / s as f64; s];
    let mut residual = f64::INFINITY;
    for _ in 0..QP_MAX_ITER {
        let wv = DVector::from_column_slice(&w);
        let grad = mu - gamma * (sigma * wv);
        // the projection ignores shifts along the all-ones direction
        let g0 = grad[0];
        let moves: Vec<f64> = grad.iter().map(|g| step * (g - g0)).collect();
        if moves.iter().all(|&m| m == 0.0) {
            return Ok(w);
        }
        let v: Vec<f64> = w.iter().zip(&moves).map(|(a, m)| a + m).collect();
        let next = project_simplex(&v);
        residual = w.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        if residual < QP_TOL {
            return Ok(w);
        }
    }
    Err(DvaError::NonConvergence {
        solver: "mean_variance_weights".into(),
        residual,
    })
}

/// Mean over sample standard deviation, zero risk-free rate.
pub fn sharpe(returns: &[f64]) -> Result<f64> {
    if returns.len() < 2 {
        return Err(DvaError::contract("Sharpe ratio needs at least two returns"));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let sd = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd <= 1e-12 * mean.abs() || sd == 0.0 {
        return Err(DvaError::DegenerateReturns);
    }
    Ok(mean / sd)
}

fn default_lambda() -> f64 {
    0.1
}

/// 13 log-spaced points from 0.1 to 100.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-1.0 + 0.25 * i as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioConfig {
    #[serde(default)]
    pub regularize: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_gamma_grid")]
    pub gamma_grid: Vec<f64>,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        PortfolioConfig {
            regularize: false,
            lambda: default_lambda(),
            gamma_grid: default_gamma_grid(),
        }
    }
}

impl PortfolioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.is_empty() {
            return Err(DvaError::config("gamma_grid must not be empty"));
        }
        if self.gamma_grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(DvaError::config("gamma_grid values must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DvaError::config("lambda must be >= 0"));
        }
        Ok(())
    }
}

/// One stock's predicted and realized `T'`-step gross returns per anchor date.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StockPredictions {
    pub ticker: String,
    pub by_anchor: BTreeMap<NaiveDate, (Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodResult {
    pub start: NaiveDate,
    pub sharpe: f64,
    pub equal_weight_sharpe: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBacktest {
    pub gamma: f64,
    pub periods: Vec<PeriodResult>,
    pub average_sharpe: f64,
    pub average_equal_weight_sharpe: f64,
    pub warnings: Vec<String>,
}

/// Covariance handed to the optimizer: the sample covariance, or the inverse
/// of its graphical-lasso precision.
pub fn effective_covariance(m: &PeriodMoments, cfg: &PortfolioConfig) -> Result<DMatrix<f64>> {
    if !cfg.regularize {
        return Ok(m.sigma.clone());
    }
    let prec = graphical_lasso(&m.sigma, cfg.lambda)?;
    let cov = prec
        .theta
        .try_inverse()
        .ok_or_else(|| DvaError::contract("regularized precision is singular"))?;
    Ok(DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)])))
}

fn realized(weights: &[f64], actual: &[&Vec<f64>], t: usize) -> Vec<f64> {
    (0..t)
        .map(|k| weights.iter().zip(actual).map(|(w, a)| w * (a[k] - 1.0)).sum())
        .collect()
}

/// Rebalance every `t_out` anchors across the span of anchor dates. A period
/// is skipped with a warning when a stock lacks it or its returns are
/// degenerate.
pub fn backtest(stocks: &[StockPredictions], t_out: usize, gamma: f64, cfg: &PortfolioConfig) -> Result<RunBacktest> {
    if stocks.is_empty() {
        return Err(DvaError::contract("backtest needs at least one stock"));
    }
    if t_out < 2 {
        return Err(DvaError::contract("backtest needs T' >= 2"));
    }
    let anchors: BTreeSet<NaiveDate> = stocks.iter().flat_map(|s| s.by_anchor.keys().copied()).collect();
    let s = stocks.len();
    let equal = vec![1.0 / s as f64; s];
    let mut periods = Vec::new();
    let mut warnings = Vec::new();
    for &start in anchors.iter().step_by(t_out) {
        let rows: Option<Vec<&(Vec<f64>, Vec<f64>)>> = stocks.iter().map(|st| st.by_anchor.get(&start)).collect();
        let Some(rows) = rows else {
            warnings.push(format!("period {start}: missing stock, skipped"));
            continue;
        };
        if rows.iter().any(|(p, a)| p.len() != t_out || a.len() != t_out) {
            return Err(DvaError::data(format!("period {start}: sequences are not length {t_out}")));
        }
        let preds: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let actual: Vec<&Vec<f64>> = rows.iter().map(|r| &r.1).collect();
        let m = prediction_moments(&preds)?;
        let cov = effective_covariance(&m, cfg)?;
        let w = mean_variance_weights(&m.mu, &cov, gamma)?;
        let sr = sharpe(&realized(&w, &actual, t_out));
        let eq = sharpe(&realized(&equal, &actual, t_out));
        match (sr, eq) {
            (Ok(sharpe), Ok(equal_weight_sharpe)) => periods.push(PeriodResult {
                start,
                sharpe,
                equal_weight_sharpe,
                weights: w,
            }),
            (Err(DvaError::DegenerateReturns), _) | (_, Err(DvaError::DegenerateReturns)) => {
                warnings.push(format!("period {start}: degenerate realized returns, skipped"));
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    let k = periods.len() as f64;
    let (avg, avg_eq) = if periods.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            periods.iter().map(|p| p.sharpe).sum::<f64>() / k,
            periods.iter().map(|p| p.equal_weight_sharpe).sum::<f64>() / k,
        )
    };
    Ok(RunBacktest {
        gamma,
        periods,
        average_sharpe: avg,
        average_equal_weight_sharpe: avg_eq,
        warnings,
    })
}

/// Risk aversion from the grid maximizing average validation Sharpe; ties go
/// to the smallest value.
pub fn tune_gamma(stocks: &[StockPredictions], t_out: usize, cfg: &PortfolioConfig) -> Result<f64> {
    cfg.validate()?;
    let mut grid = cfg.gamma_grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &g in &grid {
        let run = backtest(stocks, t_out, g, cfg)?;
        if run.periods.is_empty() {
            continue;
        }
        if best.is_none_or(|(_, b)| run.average_sharpe > b) {
            best = Some((g, run.average_sharpe));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| DvaError::config("every validation period has degenerate returns"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn moments_hand_example() {
        let m = prediction_moments(&[vec![1.01, 1.03], vec![1.02, 1.02]]).unwrap();
        assert_abs_diff_eq!(m.mu[0], 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(m.mu[1], 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(m.sigma[(0, 0)], 2e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(m.sigma[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.sigma[(1, 1)], 0.0, epsilon = 1e-15);
        assert!(prediction_moments(&[vec![1.0]]).is_err());
    }

    #[test]
    fn identical_sequences_give_rank_one() {
        let p = vec![1.0, 1.02, 0.99, 1.01];
        let m = prediction_moments(&[p.clone(), p.clone(), p]).unwrap();
        let eig = m.sigma.symmetric_eigenvalues();
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        assert!(e[0].abs() < 1e-15 && e[1].abs() < 1e-15 && e[2] > 1e-5);
    }

    #[test]
    fn glasso_identity() {
        let p = graphical_lasso(&DMatrix::identity(4, 4), 0.3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 1.0 / (1.0 + GLASSO_JITTER) } else { 0.0 };
                assert_abs_diff_eq!(p.theta[(i, j)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn glasso_large_lambda_is_diagonal() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let p = graphical_lasso(&s, 10.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(p.theta[(i, i)], 1.0 / s[(i, i)], epsilon = 1e-6);
            for j in 0..3 {
                if i != j {
                    assert_eq!(p.theta[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn glasso_zero_lambda_inverts() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let p = graphical_lasso(&s, 0.0).unwrap();
        let inv = s.try_inverse().unwrap();
        assert!((p.theta - inv).amax() < 1e-6);
    }

    #[test]
    fn simplex_projection() {
        assert_eq!(project_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let w = project_simplex(&[-1.0, 0.3, 0.9]);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn mv_hand_examples() {
        let i2 = DMatrix::identity(2, 2);
        let w = mean_variance_weights(&DVector::from_vec(vec![0.1, 0.2]), &i2, 1.0).unwrap();
        assert_abs_diff_eq!(w[0], 0.45, epsilon = 1e-6);
        assert_abs_diff_eq!(w[1], 0.55, epsilon = 1e-6);
        let w = mean_variance_weights(&DVector::from_vec(vec![-1.0, 0.5]), &i2, 1.0).unwrap();
        assert_abs_diff_eq!(w[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(w[1], 1.0, epsilon = 1e-6);
        let eq = mean_variance_weights(&DVector::from_vec(vec![0.3; 3]), &(DMatrix::identity(3, 3) * 0.04), 2.0).unwrap();
        assert_eq!(eq, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn mv_scale_equivariance() {
        let mu = DVector::from_vec(vec![0.01, 0.03, -0.02]);
        let s = DMatrix::from_row_slice(3, 3, &[0.04, 0.01, 0.0, 0.01, 0.09, 0.02, 0.0, 0.02, 0.01]);
        let a = mean_variance_weights(&mu, &s, 0.8).unwrap();
        let b = mean_variance_weights(&(&mu * 3.0), &s, 0.8 * 3.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-7);
        }
    }

    #[test]
    fn sharpe_examples() {
        assert_abs_diff_eq!(sharpe(&[0.02, 0.0]).unwrap(), 0.707_106_781_186_547_5, epsilon = 1e-12);
        assert_eq!(sharpe(&[0.01, -0.01, 0.02, -0.02]).unwrap(), 0.0);
        assert!(matches!(sharpe(&[0.01; 5]), Err(DvaError::DegenerateReturns)));
        assert!(matches!(sharpe(&[0.0; 5]), Err(DvaError::DegenerateReturns)));
    }

    #[test]
    fn gamma_grid_default() {
        let g = default_gamma_grid();
        assert_eq!(g.len(), 13);
        assert_abs_diff_eq!(g[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(g[12], 100.0, epsilon = 1e-12);
    }

    fn stock(ticker: &str, f: impl Fn(usize) -> f64, n: usize, t: usize) -> StockPredictions {
        let start = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        let mut by_anchor = BTreeMap::new();
        for a in 0..n {
            let seq: Vec<f64> = (0..t).map(|k| f(a + k + 1)).collect();
            by_anchor.insert(start + chrono::Duration::days(a as i64), (seq.clone(), seq));
        }
        StockPredictions {
            ticker: ticker.into(),
            by_anchor,
        }
    }

    #[test]
    fn identical_stocks_match_equal_weight() {
        let f = |i: usize| 1.0 + 0.01 * (i as f64 * 0.9).sin();
        let stocks = vec![stock("A", f, 40, 5), stock("B", f, 40, 5), stock("C", f, 40, 5)];
        let run = backtest(&stocks, 5, 1.0, &PortfolioConfig::default()).unwrap();
        assert_eq!(run.periods.len(), 8);
        for p in &run.periods {
            assert_eq!(p.sharpe, p.equal_weight_sharpe);
        }
    }

    #[test]
    fn missing_period_is_skipped() {
        let f = |i: usize| 1.0 + 0.01 * (i as f64).cos();
        let mut b = stock("B", f, 20, 4);
        let first = *b.by_anchor.keys().next().unwrap();
        b.by_anchor.remove(&first);
        let run = backtest(&[stock("A", f, 20, 4), b], 4, 1.0, &PortfolioConfig::default()).unwrap();
        assert_eq!(run.periods.len(), 4);
        assert_eq!(run.warnings.len(), 1);
    }

    #[test]
    fn tune_gamma_rules() {
        let f = |i: usize| 1.0 + 0.01 * (i as f64 * 0.9).sin();
        let stocks = vec![stock("A", f, 20, 4), stock("B", f, 20, 4)];
        let one = PortfolioConfig {
            gamma_grid: vec![3.0],
            ..PortfolioConfig::default()
        };
        assert_eq!(tune_gamma(&stocks, 4, &one).unwrap(), 3.0);
        // identical stocks make every gamma tie
        let two = PortfolioConfig {
            gamma_grid: vec![5.0, 0.5],
            ..PortfolioConfig::default()
        };
        assert_eq!(tune_gamma(&stocks, 4, &two).unwrap(), 0.5);
        let flat = vec![stock("A", |_| 1.01, 20, 4)];
        assert!(matches!(tune_gamma(&flat, 4, &one), Err(DvaError::Config(_))));
    }
}
