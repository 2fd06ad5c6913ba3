//! Estimator sweeps over correlated Gaussian sources.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cortical_core::channel::{gaussian_mi, GaussianSource, GaussianSourceConfig};
use cortical_core::estimators::{train_estimator, EstimatorKind};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, GridPoint};
use crate::manifest::{RunManifest, RunRecord};
use crate::{create_dir, opt, worker_pool, HarnessError, Result};

pub const DATA_FILE: &str = "sweep.csv";
pub const SUMMARY_FILE: &str = "sweep_summary.csv";

pub const DATA_HEADER: [&str; 16] = [
    "estimator",
    "alpha",
    "tau",
    "snr_db",
    "rho",
    "d",
    "seed",
    "repeat",
    "estimate_nats",
    "estimate_bits",
    "eval_std_nats",
    "truth_nats",
    "truth_bits",
    "iters",
    "batch",
    "wall_ms",
];

pub const SUMMARY_HEADER: [&str; 13] = [
    "estimator",
    "alpha",
    "tau",
    "snr_db",
    "rho",
    "d",
    "repeats",
    "mean_nats",
    "std_nats",
    "mean_bits",
    "mean_eval_std_nats",
    "truth_nats",
    "truth_bits",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub kind: EstimatorKind,
    pub point: GridPoint,
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: Cell,
    pub d: usize,
    pub estimate_nats: f64,
    pub eval_std_nats: f64,
    pub truth_nats: f64,
    pub iters: usize,
    pub batch: usize,
    pub wall_ms: u64,
}

impl SweepRow {
    fn record(&self) -> Vec<String> {
        let c = &self.cell;
        vec![
            c.kind.name().to_string(),
            opt(c.kind.alpha()),
            opt(c.kind.tau()),
            opt(c.point.snr_db),
            c.point.rho.to_string(),
            self.d.to_string(),
            c.seed.to_string(),
            c.repeat.to_string(),
            self.estimate_nats.to_string(),
            (self.estimate_nats / std::f64::consts::LN_2).to_string(),
            self.eval_std_nats.to_string(),
            self.truth_nats.to_string(),
            (self.truth_nats / std::f64::consts::LN_2).to_string(),
            self.iters.to_string(),
            self.batch.to_string(),
            self.wall_ms.to_string(),
        ]
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub manifest: RunManifest,
    pub data_path: PathBuf,
    pub summary_path: PathBuf,
}

impl SweepOutcome {
    pub fn failed(&self) -> bool {
        self.manifest.failures().next().is_some()
    }
}

/// Every (estimator, grid point, repeat) cell in output order.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let grid = cfg.grid();
    let mut out = Vec::new();
    for spec in &cfg.sweep.estimators {
        for &point in &grid {
            for repeat in 0..cfg.experiment.repeats {
                out.push(Cell {
                    kind: spec.0,
                    point,
                    repeat,
                    seed: cfg.seed(repeat),
                });
            }
        }
    }
    out
}

fn cell_id(c: &Cell) -> String {
    let at = match c.point.snr_db {
        Some(s) => format!("snr={s}"),
        None => format!("rho={}", c.point.rho),
    };
    format!("{}/{at}/repeat={}", c.kind, c.repeat)
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<SweepRow> {
    let d = cfg.sweep.dim;
    let source = GaussianSource::new(GaussianSourceConfig { dim: d, rho: cell.point.rho });
    let truth = gaussian_mi(d, cell.point.rho)?;
    let train = cfg.train_config(cell.repeat);
    let start = Instant::now();
    let (_, trace) = train_estimator(cell.kind, &source, &cell.kind.critic_spec(d), &train)?;
    Ok(SweepRow {
        cell: *cell,
        d,
        estimate_nats: trace.eval.mean,
        eval_std_nats: trace.eval.std,
        truth_nats: truth.nats,
        iters: train.iterations,
        batch: train.batch_size,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Trains and evaluates every cell, then writes the data CSV, the
/// per-grid-point summary CSV and the manifest into the output directory.
/// A failing cell is recorded in the manifest and produces no row.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let dir = cfg.experiment.out.clone();
    create_dir(&dir)?;
    let cells = cells(cfg);
    let results: Vec<Result<SweepRow>> =
        worker_pool()?.install(|| cells.par_iter().map(|c| run_cell(cfg, c)).collect());

    let mut manifest = RunManifest::new("sweep", cfg.to_text());
    let mut rows = Vec::with_capacity(results.len());
    for (cell, result) in cells.iter().zip(results) {
        let (wall_ms, error) = match result {
            Ok(row) => {
                let ms = row.wall_ms;
                rows.push(row);
                (ms, None)
            }
            Err(e) => (0, Some(e.to_string())),
        };
        manifest.runs.push(RunRecord {
            id: cell_id(cell),
            seed: cell.seed,
            wall_ms,
            error,
        });
    }

    let data_path = dir.join(DATA_FILE);
    let summary_path = dir.join(SUMMARY_FILE);
    write_data(&data_path, &rows)?;
    write_summary(&summary_path, &rows)?;
    manifest.add_output(&dir, DATA_FILE)?;
    manifest.add_output(&dir, SUMMARY_FILE)?;
    manifest.write(&dir)?;
    Ok(SweepOutcome {
        rows,
        manifest,
        data_path,
        summary_path,
    })
}

fn write_data(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    w.write_record(DATA_HEADER).map_err(|e| HarnessError::csv(path, e))?;
    for row in rows {
        w.write_record(row.record()).map_err(|e| HarnessError::csv(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Per-grid-point aggregate over repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub kind: EstimatorKind,
    pub point: GridPoint,
    pub d: usize,
    pub repeats: usize,
    pub mean_nats: f64,
    /// Sample standard deviation over repeats (0 for one repeat).
    pub std_nats: f64,
    pub mean_eval_std_nats: f64,
    pub truth_nats: f64,
}

/// Groups rows by (estimator, grid point) in first-seen order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(Cell, Vec<&SweepRow>)> = Vec::new();
    for row in rows {
        let same = |c: &Cell| c.kind == row.cell.kind && c.point == row.cell.point;
        match groups.iter_mut().find(|(c, _)| same(c)) {
            Some((_, members)) => members.push(row),
            None => groups.push((row.cell, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(cell, members)| {
            let n = members.len() as f64;
            let mean = members.iter().map(|r| r.estimate_nats).sum::<f64>() / n;
            let var = if members.len() > 1 {
                members.iter().map(|r| (r.estimate_nats - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            SummaryRow {
                kind: cell.kind,
                point: cell.point,
                d: members[0].d,
                repeats: members.len(),
                mean_nats: mean,
                std_nats: var.sqrt(),
                mean_eval_std_nats: members.iter().map(|r| r.eval_std_nats).sum::<f64>() / n,
                truth_nats: members[0].truth_nats,
            }
        })
        .collect()
}

fn write_summary(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let ln2 = std::f64::consts::LN_2;
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    w.write_record(SUMMARY_HEADER).map_err(|e| HarnessError::csv(path, e))?;
    for s in summarize(rows) {
        w.write_record([
            s.kind.name().to_string(),
            opt(s.kind.alpha()),
            opt(s.kind.tau()),
            opt(s.point.snr_db),
            s.point.rho.to_string(),
            s.d.to_string(),
            s.repeats.to_string(),
            s.mean_nats.to_string(),
            s.std_nats.to_string(),
            (s.mean_nats / ln2).to_string(),
            s.mean_eval_std_nats.to_string(),
            s.truth_nats.to_string(),
            (s.truth_nats / ln2).to_string(),
        ])
        .map_err(|e| HarnessError::csv(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
