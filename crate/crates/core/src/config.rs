//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::read_ticker_list;
use crate::error::{DvaError, Result};
use crate::portfolio::PortfolioConfig;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

fn default_runs() -> usize {
    5
}

/// Everything one experiment needs. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tickers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tickers_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub portfolio: PortfolioConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| DvaError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate, resolving relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DvaError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data_dir);
        if let Some(p) = cfg.tickers_file.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.out_dir.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DvaError::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.runs == 0 {
            return Err(DvaError::config("runs must be >= 1"));
        }
        match (&self.tickers, &self.tickers_file) {
            (Some(_), Some(_)) => return Err(DvaError::config("give either tickers or tickers_file, not both")),
            (None, None) => return Err(DvaError::config("missing field `tickers` (or `tickers_file`)")),
            (Some(t), None) if t.is_empty() => return Err(DvaError::config("tickers list is empty")),
            _ => {}
        }
        self.train.validate()?;
        self.portfolio.validate()
    }

    pub fn ticker_list(&self) -> Result<Vec<String>> {
        let list = match (&self.tickers, &self.tickers_file) {
            (Some(t), _) => t.clone(),
            (None, Some(p)) => read_ticker_list(p)?,
            (None, None) => Vec::new(),
        };
        if list.is_empty() {
            return Err(DvaError::config("no tickers to process"));
        }
        Ok(list)
    }

    /// Output root: the config's `out_dir`, else `$DVA_OUT`, else `./out`.
    pub fn output_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os("DVA_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
