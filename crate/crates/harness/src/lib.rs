//! Experiment orchestration for `cortical-core`: estimator sweeps over
//! Gaussian sources, CORTICAL capacity runs, the validation suite and SVG
//! plots of the resulting CSV tables.

use std::path::{Path, PathBuf};

use cortical_core::channel::ChannelError;
use cortical_core::cortical::CorticalError;
use cortical_core::estimators::EstimatorError;
use thiserror::Error;

pub mod capacity;
pub mod config;
pub mod manifest;
pub mod plot;
pub mod sweep;
pub mod validate;

pub use config::{ExperimentConfig, ExperimentKind, Overrides};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{0}: no data rows")]
    EmptyData(PathBuf),
    #[error("{path}: {msg}")]
    BadData { path: PathBuf, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Cortical(#[from] CorticalError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        HarnessError::Csv {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "CORTICAL_WORKERS";

/// Thread pool honoring [`WORKERS_ENV`]; results never depend on its size.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| HarnessError::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

/// Formats an optional number for CSV output; `None` is an empty cell.
pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}
