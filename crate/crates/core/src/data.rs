//! OHLCV ingestion, feature construction, windowing and chronological splits.

use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{DvaError, Result};

/// Number of input features per trading day.
pub const N_FEATURES: usize = 6;
/// Index of the gross return `r_t` inside a feature row.
pub const R_INDEX: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl PriceBar {
    fn validate(&self, ticker: &str) -> Result<()> {
        let d = format!("{ticker} {}", self.date);
        for (name, v) in [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(DvaError::data(format!("{d}: {name} price {v} is not positive")));
            }
        }
        if !(self.volume.is_finite() && self.volume >= 0.0) {
            return Err(DvaError::data(format!("{d}: volume {} is negative", self.volume)));
        }
        if self.low > self.high {
            return Err(DvaError::data(format!(
                "{d}: low {} exceeds high {}",
                self.low, self.high
            )));
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(DvaError::data(format!(
                "{d}: open/close outside the [low, high] range"
            )));
        }
        Ok(())
    }
}

/// One day's features `[o, h, l, v, delta, r]`: open/high/low normalized by
/// the previous close, volume, absolute close change, gross return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub date: NaiveDate,
    pub values: [f64; N_FEATURES],
}

impl FeatureRow {
    pub fn open(&self) -> f64 {
        self.values[0]
    }
    pub fn high(&self) -> f64 {
        self.values[1]
    }
    pub fn low(&self) -> f64 {
        self.values[2]
    }
    pub fn volume(&self) -> f64 {
        self.values[3]
    }
    pub fn delta(&self) -> f64 {
        self.values[4]
    }
    pub fn r(&self) -> f64 {
        self.values[R_INDEX]
    }
}

/// One training example: `T` feature rows ending at the anchor and the next
/// `T'` gross returns.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub anchor: NaiveDate,
    /// Index of the anchor row within the feature sequence.
    pub anchor_index: usize,
    pub x: Vec<[f64; N_FEATURES]>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<WindowPair>,
    pub validation: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
    pub ratio: (usize, usize, usize),
}

#[derive(Debug, Deserialize)]
struct CsvBar {
    date: String,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
}

const HEADER: [&str; 6] = ["date", "open", "high", "low", "close", "volume"];

/// Read `date,open,high,low,close,volume` rows, validate them and return
/// them in date order. Duplicate dates are rejected.
pub fn load_ohlcv(path: &Path, ticker: &str) -> Result<Vec<PriceBar>> {
    let file = File::open(path).map_err(|e| DvaError::io(path, e))?;
    read_ohlcv(file, ticker)
}

pub fn read_ohlcv<R: std::io::Read>(reader: R, ticker: &str) -> Result<Vec<PriceBar>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(HEADER.iter().copied()) {
        return Err(DvaError::Parse {
            line: 1,
            message: format!("{ticker}: expected header {}", HEADER.join(",")),
        });
    }
    let mut bars = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: CsvBar = record.deserialize(Some(&headers)).map_err(|e| DvaError::Parse {
            line,
            message: format!("{ticker}: {e}"),
        })?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d").map_err(|e| DvaError::Parse {
            line,
            message: format!("{ticker}: bad date {:?}: {e}", row.date),
        })?;
        let bar = PriceBar {
            date,
            open: row.open,
            high: row.high,
            low: row.low,
            close: row.close,
            volume: row.volume,
        };
        bar.validate(ticker)?;
        bars.push(bar);
    }
    bars.sort_by_key(|b| b.date);
    if let Some(w) = bars.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(DvaError::data(format!("{ticker}: duplicate date {}", w[0].date)));
    }
    Ok(bars)
}

pub fn write_ohlcv(path: &Path, bars: &[PriceBar]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for b in bars {
        w.write_record([
            b.date.format("%Y-%m-%d").to_string(),
            b.open.to_string(),
            b.high.to_string(),
            b.low.to_string(),
            b.close.to_string(),
            b.volume.to_string(),
        ])?;
    }
    w.flush().map_err(|e| DvaError::io(path, e))?;
    Ok(())
}

/// Newline-separated tickers; blank lines and `#` comments are skipped.
pub fn read_ticker_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| DvaError::io(path, e))?;
    Ok(parse_ticker_list(&text))
}

pub fn parse_ticker_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.trim_start_matches('$').to_string())
        .collect()
}

/// Build feature rows from consecutive bars. The first bar only supplies the
/// previous close. Volume is left raw; see [`VolumeStats`].
pub fn featurize(bars: &[PriceBar]) -> Result<Vec<FeatureRow>> {
    if bars.len() < 2 {
        return Err(DvaError::data(format!(
            "featurize needs at least 2 bars, got {}",
            bars.len()
        )));
    }
    bars.windows(2)
        .map(|w| {
            let (prev, cur) = (&w[0], &w[1]);
            let c = prev.close;
            if c == 0.0 {
                return Err(DvaError::data(format!("{}: previous close is zero", cur.date)));
            }
            Ok(FeatureRow {
                date: cur.date,
                values: [
                    cur.open / c,
                    cur.high / c,
                    cur.low / c,
                    cur.volume,
                    cur.close - c,
                    cur.close / c,
                ],
            })
        })
        .collect()
}

/// Mean and standard deviation of volume over the training period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeStats {
    pub mean: f64,
    pub std: f64,
}

impl VolumeStats {
    pub fn fit(rows: &[FeatureRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = rows.iter().map(FeatureRow::volume).sum::<f64>() / n;
        let var = rows
            .iter()
            .map(|r| (r.volume() - mean).powi(2))
            .sum::<f64>()
            / n;
        VolumeStats {
            mean,
            std: var.sqrt(),
        }
    }

    /// z-score the volume column in place. A constant training volume maps to 0.
    pub fn apply(&self, rows: &mut [FeatureRow]) {
        let scale = if self.std > 0.0 { 1.0 / self.std } else { 0.0 };
        for r in rows {
            r.values[3] = (r.values[3] - self.mean) * scale;
        }
    }
}

/// Stride-1 sliding windows; `max(0, L - T - T' + 1)` of them.
pub fn make_windows(features: &[FeatureRow], t_in: usize, t_out: usize) -> Result<Vec<WindowPair>> {
    make_windows_strided(features, t_in, t_out, 1)
}

pub fn make_windows_strided(
    features: &[FeatureRow],
    t_in: usize,
    t_out: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if t_in == 0 || t_out == 0 || stride == 0 {
        return Err(DvaError::config("window lengths and stride must be at least 1"));
    }
    if features.len() < t_in + t_out {
        return Ok(Vec::new());
    }
    let last_anchor = features.len() - t_out - 1;
    Ok((t_in - 1..=last_anchor)
        .step_by(stride)
        .map(|a| WindowPair {
            anchor: features[a].date,
            anchor_index: a,
            x: features[a + 1 - t_in..=a].iter().map(|f| f.values).collect(),
            y: features[a + 1..=a + t_out].iter().map(FeatureRow::r).collect(),
        })
        .collect())
}

/// Window counts for a chronological split: train and validation are floored,
/// the remainder goes to test.
pub fn split_counts(n: usize, ratio: (usize, usize, usize)) -> (usize, usize, usize) {
    let total = ratio.0 + ratio.1 + ratio.2;
    let train = n * ratio.0 / total;
    let val = n * ratio.1 / total;
    (train, val, n - train - val)
}

pub fn chronological_split(pairs: Vec<WindowPair>, ratio: (usize, usize, usize)) -> Result<DatasetSplit> {
    if pairs.len() < 10 {
        return Err(DvaError::config(format!(
            "need at least 10 windows to split, got {}",
            pairs.len()
        )));
    }
    if ratio.0 == 0 || ratio.1 == 0 || ratio.2 == 0 {
        return Err(DvaError::config("split ratio parts must be positive"));
    }
    if pairs.windows(2).any(|w| w[0].anchor >= w[1].anchor) {
        return Err(DvaError::contract("windows must be sorted by anchor date"));
    }
    let (n_train, n_val, _) = split_counts(pairs.len(), ratio);
    let mut train = pairs;
    let mut validation = train.split_off(n_train);
    let test = validation.split_off(n_val);
    Ok(DatasetSplit {
        train,
        validation,
        test,
        ratio,
    })
}

/// Features, volume statistics and split windows for one stock.
#[derive(Debug, Clone)]
pub struct StockData {
    pub ticker: String,
    pub features: Vec<FeatureRow>,
    pub volume: VolumeStats,
    pub split: DatasetSplit,
}

/// Featurize, fit volume statistics on the rows visible to training inputs,
/// z-score volume, then window and split.
pub fn prepare_stock(ticker: &str, bars: &[PriceBar], t_in: usize, t_out: usize) -> Result<StockData> {
    let mut features = featurize(bars)?;
    let probe = make_windows(&features, t_in, t_out)?;
    if probe.len() < 10 {
        return Err(DvaError::config(format!(
            "{ticker}: {} feature rows give only {} windows for T={t_in}, T'={t_out}",
            features.len(),
            probe.len()
        )));
    }
    let (n_train, _, _) = split_counts(probe.len(), (7, 1, 2));
    let last_train_row = probe[n_train.max(1) - 1].anchor_index;
    let volume = VolumeStats::fit(&features[..=last_train_row]);
    volume.apply(&mut features);
    let windows = make_windows(&features, t_in, t_out)?;
    let split = chronological_split(windows, (7, 1, 2))?;
    Ok(StockData {
        ticker: ticker.to_string(),
        features,
        volume,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(i: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2016, 1, 1).unwrap() + chrono::Duration::days(i)
    }

    fn bar(i: i64, o: f64, h: f64, l: f64, c: f64) -> PriceBar {
        PriceBar {
            date: date(i),
            open: o,
            high: h,
            low: l,
            close: c,
            volume: 1000.0,
        }
    }

    fn flat_rows(n: usize) -> Vec<FeatureRow> {
        (0..n)
            .map(|i| FeatureRow {
                date: date(i as i64),
                values: [1.0, 1.0, 1.0, 0.0, 0.0, 1.0 + i as f64],
            })
            .collect()
    }

    #[test]
    fn empty_file_gives_no_bars() {
        let bars = read_ohlcv("date,open,high,low,close,volume\n".as_bytes(), "X").unwrap();
        assert!(bars.is_empty());
    }

    #[test]
    fn low_above_high_names_the_date() {
        let csv = "date,open,high,low,close,volume\n2016-01-04,10,11,12,10.5,100\n";
        let err = read_ohlcv(csv.as_bytes(), "X").unwrap_err();
        assert!(matches!(err, DvaError::Data(_)));
        assert!(err.to_string().contains("2016-01-04"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "date,open,high,low,close,volume\n2016-01-04,10,11,9,10.5,100\n2016-01-05,abc,11,9,10,1\n";
        match read_ohlcv(csv.as_bytes(), "X").unwrap_err() {
            DvaError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicates_rejected_and_rows_sorted() {
        let csv = "date,open,high,low,close,volume\n2016-01-05,10,11,9,10.5,100\n2016-01-04,10,11,9,10.5,100\n";
        let bars = read_ohlcv(csv.as_bytes(), "X").unwrap();
        assert!(bars[0].date < bars[1].date);
        let dup = "date,open,high,low,close,volume\n2016-01-05,10,11,9,10.5,100\n2016-01-05,10,11,9,10.5,100\n";
        assert!(read_ohlcv(dup.as_bytes(), "X").is_err());
    }

    #[test]
    fn wrong_header_is_parse_error() {
        let csv = "day,open,high,low,close,volume\n";
        assert!(matches!(
            read_ohlcv(csv.as_bytes(), "X").unwrap_err(),
            DvaError::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn featurize_normalizes_by_previous_close() {
        let bars = [bar(0, 100.0, 100.0, 100.0, 100.0), bar(1, 102.0, 105.0, 99.0, 101.0)];
        let rows = featurize(&bars).unwrap();
        assert_eq!(rows.len(), 1);
        let r = rows[0];
        assert!((r.open() - 1.02).abs() < 1e-15);
        assert!((r.high() - 1.05).abs() < 1e-15);
        assert!((r.low() - 0.99).abs() < 1e-15);
        assert!((r.r() - 1.01).abs() < 1e-15);
        assert_eq!(r.delta(), 1.0);
    }

    #[test]
    fn featurize_constant_prices() {
        let bars: Vec<_> = (0..5).map(|i| bar(i, 50.0, 50.0, 50.0, 50.0)).collect();
        for r in featurize(&bars).unwrap() {
            assert_eq!(r.r(), 1.0);
            assert_eq!(r.delta(), 0.0);
        }
        assert!(featurize(&bars[..1]).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&flat_rows(755), 10, 10).unwrap().len(), 736);
        assert!(make_windows(&flat_rows(19), 10, 10).unwrap().is_empty());
        assert_eq!(make_windows(&flat_rows(20), 10, 10).unwrap().len(), 1);
    }

    #[test]
    fn window_target_starts_after_anchor() {
        let rows = flat_rows(40);
        for w in make_windows(&rows, 5, 3).unwrap() {
            assert_eq!(w.y[0], rows[w.anchor_index + 1].r());
            assert_eq!(w.x.last().unwrap()[R_INDEX], rows[w.anchor_index].r());
            assert_eq!(w.x.len(), 5);
            assert_eq!(w.y.len(), 3);
        }
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_counts(100, (7, 1, 2)), (70, 10, 20));
        // floor(515.2), floor(73.6), remainder
        assert_eq!(split_counts(736, (7, 1, 2)), (515, 73, 148));
        let split = chronological_split(make_windows(&flat_rows(30), 3, 2).unwrap(), (7, 1, 2)).unwrap();
        let last_train = split.train.last().unwrap().anchor;
        assert!(split.validation.iter().all(|w| w.anchor > last_train));
        let last_val = split.validation.last().unwrap().anchor;
        assert!(split.test.iter().all(|w| w.anchor > last_val));
    }

    #[test]
    fn split_needs_ten_windows() {
        let few = make_windows(&flat_rows(12), 2, 2).unwrap();
        assert_eq!(few.len(), 9);
        assert!(matches!(chronological_split(few, (7, 1, 2)), Err(DvaError::Config(_))));
    }

    #[test]
    fn ticker_list_parsing() {
        let text = "AAPL\n\n$MSFT  # comment\n# skipped\nGOOG\n";
        assert_eq!(parse_ticker_list(text), vec!["AAPL", "MSFT", "GOOG"]);
    }

    #[test]
    fn volume_zscore() {
        let mut rows = flat_rows(4);
        for (i, r) in rows.iter_mut().enumerate() {
            r.values[3] = i as f64;
        }
        let stats = VolumeStats::fit(&rows);
        stats.apply(&mut rows);
        let mean: f64 = rows.iter().map(|r| r.volume()).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
    }
}
