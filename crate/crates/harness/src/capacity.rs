//! CORTICAL capacity runs over an SNR grid.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cortical_core::channel::{psk_mutual_information, Information};
use cortical_core::cortical::{cortical_train, export_constellation, CapacityReport, Constellation, LatentConfig};
use cortical_core::nn::NetParams;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::manifest::{RunManifest, RunRecord};
use crate::{create_dir, opt, worker_pool, HarnessError, Result};

pub const DATA_FILE: &str = "capacity.csv";
pub const TRACE_FILE: &str = "capacity_trace.csv";
pub const CONSTELLATION_FILE: &str = "constellation.csv";

/// Seed of the PSK baseline's noise draws; fixed so baselines agree across
/// runs and repeats.
pub const PSK_SEED: u64 = 0x5eed;

pub const DATA_HEADER: [&str; 21] = [
    "latent",
    "snr_db",
    "alpha",
    "seed",
    "repeat",
    "hat_nats",
    "hat_bits",
    "tilde_nats",
    "tilde_bits",
    "hat_std_nats",
    "tilde_std_nats",
    "reference_nats",
    "reference_bits",
    "psk_nats",
    "psk_bits",
    "max_power_error",
    "gen_iters",
    "disc_steps",
    "batch",
    "eval_batches",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityRow {
    pub snr_db: f64,
    pub seed: u64,
    pub repeat: usize,
    pub report: CapacityReport,
    /// `m`-PSK mutual information for `m`-ary latents.
    pub psk: Option<Information>,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct CapacityOutcome {
    pub rows: Vec<CapacityRow>,
    pub constellation: Option<Constellation>,
    pub manifest: RunManifest,
    pub data_path: PathBuf,
}

impl CapacityOutcome {
    pub fn failed(&self) -> bool {
        self.manifest.failures().next().is_some()
    }
}

/// `m`-PSK mutual information over the run's channel at `snr_db`.
pub fn psk_baseline(cfg: &ExperimentConfig, snr_db: f64) -> Result<Option<Information>> {
    match cfg.capacity.latent.0 {
        LatentConfig::Discrete { m } => {
            let channel = cfg.cortical_config(snr_db, 0).channel;
            Ok(Some(psk_mutual_information(m, &channel, cfg.capacity.psk_draws, PSK_SEED)?))
        }
        LatentConfig::Gaussian { .. } => Ok(None),
    }
}

fn run_one(cfg: &ExperimentConfig, snr_db: f64, repeat: usize) -> Result<(CapacityRow, NetParams)> {
    let cc = cfg.cortical_config(snr_db, repeat);
    let start = Instant::now();
    let (gen, _, report) = cortical_train(&cc)?;
    let wall_ms = start.elapsed().as_millis() as u64;
    let row = CapacityRow {
        snr_db,
        seed: cc.seed,
        repeat,
        report,
        psk: psk_baseline(cfg, snr_db)?,
        wall_ms,
    };
    Ok((row, gen))
}

/// Runs CORTICAL at every (SNR, repeat), writing the capacity CSV, the
/// per-generator-step trace CSV, the constellation of the final SNR's first
/// repeat and the manifest.
pub fn run_capacity(cfg: &ExperimentConfig) -> Result<CapacityOutcome> {
    cfg.validate()?;
    let dir = cfg.experiment.out.clone();
    create_dir(&dir)?;
    let jobs: Vec<(f64, usize)> = cfg
        .capacity
        .snr_db
        .iter()
        .flat_map(|&s| (0..cfg.experiment.repeats).map(move |r| (s, r)))
        .collect();
    let results: Vec<Result<(CapacityRow, NetParams)>> =
        worker_pool()?.install(|| jobs.par_iter().map(|&(s, r)| run_one(cfg, s, r)).collect());

    let last_snr = *cfg.capacity.snr_db.last().expect("validated non-empty");
    let mut manifest = RunManifest::new("capacity", cfg.to_text());
    let mut rows = Vec::new();
    let mut constellation = None;
    for (&(snr_db, repeat), result) in jobs.iter().zip(results) {
        let seed = cfg.seed(repeat);
        let (wall_ms, error) = match result {
            Ok((row, gen)) => {
                if snr_db == last_snr && repeat == 0 {
                    let cc = cfg.cortical_config(snr_db, repeat);
                    constellation = Some(export_constellation(&gen, &cc, cfg.capacity.constellation_points, seed)?);
                }
                let ms = row.wall_ms;
                rows.push(row);
                (ms, None)
            }
            Err(e) => (0, Some(e.to_string())),
        };
        manifest.runs.push(RunRecord {
            id: format!("snr={snr_db}/repeat={repeat}"),
            seed,
            wall_ms,
            error,
        });
    }

    let data_path = dir.join(DATA_FILE);
    write_data(&data_path, cfg, &rows)?;
    manifest.add_output(&dir, DATA_FILE)?;
    write_trace(&dir.join(TRACE_FILE), &rows)?;
    manifest.add_output(&dir, TRACE_FILE)?;
    if let Some(c) = &constellation {
        write_constellation(&dir.join(CONSTELLATION_FILE), c)?;
        manifest.add_output(&dir, CONSTELLATION_FILE)?;
    }
    manifest.write(&dir)?;
    Ok(CapacityOutcome {
        rows,
        constellation,
        manifest,
        data_path,
    })
}

fn write_data(path: &Path, cfg: &ExperimentConfig, rows: &[CapacityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    w.write_record(DATA_HEADER).map_err(|e| HarnessError::csv(path, e))?;
    let c = &cfg.capacity;
    for row in rows {
        let r = &row.report;
        w.write_record([
            c.latent.to_string(),
            row.snr_db.to_string(),
            r.alpha.to_string(),
            row.seed.to_string(),
            row.repeat.to_string(),
            r.hat.nats.to_string(),
            r.hat.bits.to_string(),
            r.tilde.nats.to_string(),
            r.tilde.bits.to_string(),
            r.hat_std_nats.to_string(),
            r.tilde_std_nats.to_string(),
            r.reference_nats().to_string(),
            r.reference_bits.to_string(),
            opt(row.psk.map(|p| p.nats)),
            opt(row.psk.map(|p| p.bits)),
            r.max_power_error.to_string(),
            c.gen_iters.to_string(),
            c.disc_steps.to_string(),
            c.batch.to_string(),
            cfg.experiment.eval_batches.to_string(),
            row.wall_ms.to_string(),
        ])
        .map_err(|e| HarnessError::csv(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_trace(path: &Path, rows: &[CapacityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    w.write_record(["snr_db", "repeat", "step", "hat_nats", "tilde_nats"])
        .map_err(|e| HarnessError::csv(path, e))?;
    for row in rows {
        let r = &row.report;
        for (step, (h, t)) in r.trace_hat.iter().zip(&r.trace_tilde).enumerate() {
            w.write_record([
                row.snr_db.to_string(),
                row.repeat.to_string(),
                step.to_string(),
                h.to_string(),
                t.to_string(),
            ])
            .map_err(|e| HarnessError::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Channel inputs as `x` rows and outputs as `y` rows, one point per row.
pub fn write_constellation(path: &Path, c: &Constellation) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    w.write_record(["kind", "re", "im"]).map_err(|e| HarnessError::csv(path, e))?;
    for (kind, t) in [("x", &c.x), ("y", &c.y)] {
        for i in 0..t.rows() {
            let p = t.row(i);
            w.write_record([kind.to_string(), p[0].to_string(), p[1].to_string()])
                .map_err(|e| HarnessError::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
