//! Synthetic OHLCV universes with a known noiseless return path.
//!
//! Closes follow `c_t = c_{t-1} * (1 + mu_t + sigma * eps_t)` where `mu_t` is
//! the deterministic part of the process; `1 + mu_t` is written to the truth
//! sidecar so signal-recovery checks never need to regenerate the data.

use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::PriceBar;
use crate::error::{DvaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    /// `mu_t = drift + amplitude * sin(2 pi t / period + phase)`
    Sinusoid,
    /// `mu_t = drift + ar_coef * (r_{t-1} - 1 - drift)` on realized returns
    Ar1,
    /// `mu_t = drift`
    RandomWalk,
}

fn default_start_price() -> f64 {
    100.0
}
fn default_amplitude() -> f64 {
    0.01
}
fn default_period() -> f64 {
    20.0
}
fn default_ar_coef() -> f64 {
    0.5
}
fn default_volume() -> f64 {
    1.0e6
}
fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 4).unwrap()
}

/// One synthetic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesSpec {
    pub name: String,
    pub process: Process,
    /// Number of bars.
    pub length: usize,
    /// Per-step return noise scale.
    pub sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub drift: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default = "default_ar_coef")]
    pub ar_coef: f64,
    #[serde(default = "default_start_price")]
    pub start_price: f64,
    #[serde(default = "default_volume")]
    pub volume: f64,
    #[serde(default = "default_start_date")]
    pub start_date: NaiveDate,
}

impl SeriesSpec {
    pub fn new(name: &str, process: Process, length: usize, sigma: f64, seed: u64) -> Self {
        SeriesSpec {
            name: name.to_string(),
            process,
            length,
            sigma,
            seed,
            drift: 0.0,
            amplitude: default_amplitude(),
            period: default_period(),
            phase: 0.0,
            ar_coef: default_ar_coef(),
            start_price: default_start_price(),
            volume: default_volume(),
            start_date: default_start_date(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DvaError::config(format!("{}: sigma must be >= 0", self.name)));
        }
        if self.length < 2 {
            return Err(DvaError::config(format!("{}: length must be at least 2", self.name)));
        }
        if !(self.start_price > 0.0) {
            return Err(DvaError::config(format!("{}: start_price must be positive", self.name)));
        }
        if self.process == Process::Sinusoid && !(self.period > 0.0) {
            return Err(DvaError::config(format!("{}: period must be positive", self.name)));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(DvaError::config(format!("invalid series name {:?}", self.name)));
        }
        Ok(())
    }
}

/// A synthetic universe file: the input to `dva synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniverseSpec {
    pub schema_version: u32,
    pub series: Vec<SeriesSpec>,
}

/// Generated bars plus the noiseless gross return for every bar after the first.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub bars: Vec<PriceBar>,
    pub truth: Vec<(NaiveDate, f64)>,
}

fn next_trading_day(d: NaiveDate) -> NaiveDate {
    let mut n = d.succ_opt().expect("date in range");
    while matches!(n.weekday(), Weekday::Sat | Weekday::Sun) {
        n = n.succ_opt().expect("date in range");
    }
    n
}

pub fn synth_generate(spec: &SeriesSpec) -> Result<SyntheticSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // intraday anchors and volume draw from their own stream so the close path
    // depends only on the return noise
    let mut aux = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5DEE_CE66_D1CE_4E5B);

    let mut date = spec.start_date;
    while matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
        date = date.succ_opt().expect("date in range");
    }
    let mut bars = Vec::with_capacity(spec.length);
    let mut truth = Vec::with_capacity(spec.length - 1);
    let mut close = spec.start_price;
    bars.push(PriceBar {
        date,
        open: close,
        high: close,
        low: close,
        close,
        volume: spec.volume.round(),
    });
    let mut prev_net = spec.drift;
    for t in 1..spec.length {
        date = next_trading_day(date);
        let mu = match spec.process {
            Process::Sinusoid => {
                spec.drift
                    + spec.amplitude
                        * (2.0 * std::f64::consts::PI * t as f64 / spec.period + spec.phase).sin()
            }
            Process::Ar1 => spec.drift + spec.ar_coef * (prev_net - spec.drift),
            Process::RandomWalk => spec.drift,
        };
        let eps: f64 = rng.sample(StandardNormal);
        let r = 1.0 + mu + spec.sigma * eps;
        if r <= 0.0 {
            return Err(DvaError::config(format!(
                "{}: gross return {r} at step {t} is not positive; reduce sigma",
                spec.name
            )));
        }
        prev_net = r - 1.0;
        let prev_close = close;
        close = prev_close * r;

        let (xo, x1, x2, xv): (f64, f64, f64, f64) = (
            aux.sample(StandardNormal),
            aux.sample(StandardNormal),
            aux.sample(StandardNormal),
            aux.sample(StandardNormal),
        );
        let open = prev_close * (1.0 + 0.5 * spec.sigma * xo).max(0.5);
        let mid = 0.5 * (open + close);
        let anchors = [
            open,
            close,
            mid * (1.0 + 0.5 * spec.sigma * x1.abs()),
            mid * (1.0 - 0.5 * spec.sigma * x2.abs()).max(0.5),
        ];
        let high = anchors.iter().copied().fold(f64::MIN, f64::max);
        let low = anchors.iter().copied().fold(f64::MAX, f64::min);
        bars.push(PriceBar {
            date,
            open,
            high,
            low,
            close,
            volume: (spec.volume * (0.3 * xv).exp()).round(),
        });
        truth.push((date, 1.0 + mu));
    }
    Ok(SyntheticSeries { bars, truth })
}

pub fn write_truth(path: &Path, truth: &[(NaiveDate, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "r_true"])?;
    for (d, r) in truth {
        w.write_record([d.format("%Y-%m-%d").to_string(), r.to_string()])?;
    }
    w.flush().map_err(|e| DvaError::io(path, e))?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<(NaiveDate, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        r_true: f64,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<Row>()
        .map(|r| r.map(|r| (r.date, r.r_true)).map_err(DvaError::from))
        .collect()
}
