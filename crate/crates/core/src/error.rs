use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DvaError {
    /// A caller broke an operation's documented precondition (shape, range, mode).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        component: String,
    },

    #[error("{solver} did not converge (last residual {residual:e})")]
    NonConvergence { solver: &'static str, residual: f64 },

    #[error("degenerate returns: standard deviation is zero")]
    DegenerateReturns,

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("refusing to overwrite {}; pass --force", .0.display())]
    WouldOverwrite(PathBuf),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DvaError {
    pub fn contract(msg: impl Into<String>) -> Self {
        DvaError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        DvaError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        DvaError::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DvaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            DvaError::Contract(_) => "contract",
            DvaError::Config(_) => "config",
            DvaError::Data(_) => "data",
            DvaError::Parse { .. } => "parse",
            DvaError::NonFinite { .. } => "non_finite",
            DvaError::NonConvergence { .. } => "non_convergence",
            DvaError::DegenerateReturns => "degenerate_returns",
            DvaError::MissingArtifact(_) => "missing_artifact",
            DvaError::HashMismatch { .. } => "hash_mismatch",
            DvaError::WouldOverwrite(_) => "would_overwrite",
            DvaError::Io { .. } => "io",
            DvaError::Json(_) => "json",
            DvaError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, DvaError>;
