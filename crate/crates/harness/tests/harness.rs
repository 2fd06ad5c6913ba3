use std::path::Path;
use std::process::Command;

use cortical_harness::capacity::{run_capacity, CONSTELLATION_FILE, DATA_FILE as CAPACITY_FILE};
use cortical_harness::config::{EstimatorSpec, ExperimentConfig, ExperimentKind};
use cortical_harness::manifest::RunManifest;
use cortical_harness::plot::{write_plot, PlotKind};
use cortical_harness::sweep::{run_sweep, DATA_FILE, SUMMARY_FILE};
use cortical_harness::validate::{run_validate, EstimatorSuite};
use cortical_harness::HarnessError;
use cortical_core::estimators::{nwj_estimate, EstimatorKind};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cortical"))
}

fn tiny_sweep(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        "[experiment]\nrepeats = 2\neval_batches = 2\n\n[sweep]\nestimators = [\"ddime-hat(alpha=1)\", \"nwj\"]\nsnr_db = [-5, 0, 5]\ndim = 1\n\n[train]\niters = 10\nbatch = 16\n",
    )
    .unwrap();
    cfg.experiment.out = out.to_path_buf();
    cfg
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

/// CSV contents with the named columns removed.
fn without(path: &Path, drop: &[&str]) -> Vec<Vec<String>> {
    let (header, rows) = read_csv(path);
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !drop.contains(&header[i].as_str())).collect();
    std::iter::once(header)
        .chain(rows)
        .map(|r| keep.iter().map(|&i| r[i].clone()).collect())
        .collect()
}

#[test]
fn sweep_row_count_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_sweep(dir.path());
    cfg.experiment.repeats = 10;
    let outcome = run_sweep(&cfg).unwrap();
    assert!(!outcome.failed());
    let (header, rows) = read_csv(&dir.path().join(DATA_FILE));
    assert_eq!(rows.len(), 60);
    assert_eq!(
        header.join(","),
        "estimator,alpha,tau,snr_db,rho,d,seed,repeat,estimate_nats,estimate_bits,eval_std_nats,truth_nats,truth_bits,iters,batch,wall_ms"
    );
    for row in &rows {
        let seed: u64 = row[6].parse().unwrap();
        let repeat: u64 = row[7].parse().unwrap();
        assert_eq!(seed, repeat);
        let snr: f64 = row[3].parse().unwrap();
        let truth = -0.5 * (1.0 - 1.0 / (1.0 + 10f64.powf(-snr / 10.0))).ln();
        assert!((row[11].parse::<f64>().unwrap() - truth).abs() < 1e-12);
    }
    let manifest = RunManifest::read(dir.path()).unwrap();
    assert_eq!(manifest.runs.len(), 60);
    manifest.verify(dir.path()).unwrap();
}

#[test]
fn summary_means_match_data_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_sweep(dir.path());
    cfg.experiment.repeats = 3;
    run_sweep(&cfg).unwrap();
    let (_, data) = read_csv(&dir.path().join(DATA_FILE));
    let (header, summary) = read_csv(&dir.path().join(SUMMARY_FILE));
    let mean_col = header.iter().position(|h| h == "mean_nats").unwrap();
    assert_eq!(summary.len(), 6);
    for s in &summary {
        let members: Vec<f64> = data
            .iter()
            .filter(|d| d[..6] == s[..6])
            .map(|d| d[8].parse().unwrap())
            .collect();
        assert_eq!(members.len(), 3);
        let mean = members.iter().sum::<f64>() / 3.0;
        assert!((s[mean_col].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn zero_mi_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.out = dir.path().to_path_buf();
    cfg.experiment.repeats = 1;
    cfg.experiment.eval_batches = 50;
    cfg.sweep.estimators = vec![EstimatorSpec(EstimatorKind::DDimeTilde { alpha: 1.0 })];
    cfg.sweep.rho = Some(vec![0.0]);
    cfg.sweep.dim = 1;
    cfg.train.iters = 800;
    cfg.train.batch = 256;
    let outcome = run_sweep(&cfg).unwrap();
    let row = &outcome.rows[0];
    assert_eq!(row.truth_nats, 0.0);
    assert!(row.estimate_nats.abs() < 0.05, "{}", row.estimate_nats);
    let (_, rows) = read_csv(&outcome.data_path);
    assert_eq!(rows[0][3], "");
    assert_eq!(rows[0][11], "0");
}

#[test]
fn failed_runs_are_recorded_and_the_rest_continue() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fail");
    let status = bin()
        .args(["sweep", "--estimator", "nwj,ddime-tilde", "--snr-db", "10", "--iters", "200"])
        .args(["--batch", "16", "--lr", "5", "--repeats", "2", "--eval-batches", "2", "--dim", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    let manifest = RunManifest::read(&out).unwrap();
    let failed: Vec<&str> = manifest.failures().map(|r| r.id.as_str()).collect();
    assert_eq!(failed, ["nwj/snr=10/repeat=0", "nwj/snr=10/repeat=1"]);
    let (_, rows) = read_csv(&out.join(DATA_FILE));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[0] == "ddime-tilde"));
    manifest.verify(&out).unwrap();
}

#[test]
fn unwritable_output_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, "x").unwrap();
    let cfg = tiny_sweep(&file.join("sub"));
    assert!(matches!(run_sweep(&cfg), Err(HarnessError::Io { .. })));
}

#[test]
fn tampered_outputs_fail_manifest_verification() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_sweep(dir.path());
    cfg.experiment.repeats = 1;
    run_sweep(&cfg).unwrap();
    let manifest = RunManifest::read(dir.path()).unwrap();
    manifest.verify(dir.path()).unwrap();
    std::fs::write(dir.path().join(SUMMARY_FILE), "changed").unwrap();
    assert!(manifest.verify(dir.path()).is_err());
    std::fs::remove_file(dir.path().join(DATA_FILE)).unwrap();
    assert!(manifest.verify(dir.path()).is_err());
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let run = |workers: &str| {
        let out = dir.path().join(format!("w{workers}"));
        let status = bin()
            .env(cortical_harness::WORKERS_ENV, workers)
            .args(["sweep", "--estimator", "ddime-tilde,smile(tau=5)", "--snr-db", "0,5", "--iters", "20"])
            .args(["--batch", "16", "--repeats", "3", "--eval-batches", "2", "--dim", "1", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        (
            without(&out.join(DATA_FILE), &["wall_ms"]),
            std::fs::read(out.join(SUMMARY_FILE)).unwrap(),
        )
    };
    assert_eq!(run("1"), run("3"));
    let bad = bin()
        .env(cortical_harness::WORKERS_ENV, "zero")
        .args(["sweep", "--iters", "1", "--repeats", "1", "--out"])
        .arg(dir.path().join("bad"))
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(1));
}

#[test]
fn capacity_rows_constellation_and_reference() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.kind = ExperimentKind::CapacityRun;
    cfg.experiment.out = dir.path().to_path_buf();
    cfg.experiment.repeats = 1;
    cfg.experiment.eval_batches = 2;
    cfg.capacity.gen_iters = 3;
    cfg.capacity.disc_steps = 2;
    cfg.capacity.batch = 32;
    cfg.capacity.constellation_points = 50;
    let outcome = run_capacity(&cfg).unwrap();
    assert!(!outcome.failed());
    let (header, rows) = read_csv(&dir.path().join(CAPACITY_FILE));
    assert_eq!(rows.len(), 3);
    let snr_col = header.iter().position(|h| h == "snr_db").unwrap();
    let ref_col = header.iter().position(|h| h == "reference_bits").unwrap();
    let psk_col = header.iter().position(|h| h == "psk_bits").unwrap();
    for row in &rows {
        let snr: f64 = row[snr_col].parse().unwrap();
        let expected = (1.0 + 10f64.powf(snr / 10.0)).log2();
        assert!((row[ref_col].parse::<f64>().unwrap() - expected).abs() < 1e-12);
        assert_eq!(row[psk_col], "");
    }
    let (header, points) = read_csv(&dir.path().join(CONSTELLATION_FILE));
    assert_eq!(header, ["kind", "re", "im"]);
    assert_eq!(points.len(), 100);
    assert_eq!(points.iter().filter(|p| p[0] == "x").count(), 50);
    assert!(points.iter().all(|p| p[0] == "x" || p[0] == "y"));
    let power: f64 = points
        .iter()
        .filter(|p| p[0] == "x")
        .map(|p| p[1].parse::<f64>().unwrap().powi(2) + p[2].parse::<f64>().unwrap().powi(2))
        .sum::<f64>()
        / 100.0;
    assert!((power - 1.0).abs() < 1e-9, "{power}");
    RunManifest::read(dir.path()).unwrap().verify(dir.path()).unwrap();
}

#[test]
fn discrete_capacity_carries_a_psk_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["capacity", "--latent", "discrete:8", "--snr-db", "10", "--gen-iters", "2", "--disc-steps", "1"])
        .args(["--batch", "16", "--repeats", "1", "--eval-batches", "1", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let (header, rows) = read_csv(&dir.path().join(CAPACITY_FILE));
    let psk: f64 = rows[0][header.iter().position(|h| h == "psk_bits").unwrap()].parse().unwrap();
    assert!(psk > 2.5 && psk < 3.0, "{psk}");
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const SWEEP_HEAD: &str = "estimator,alpha,tau,snr_db,rho,d,seed,repeat,estimate_nats,estimate_bits,eval_std_nats,truth_nats,truth_bits,iters,batch,wall_ms\n";

#[test]
fn plot_structure_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("one.csv");
    let mut text = SWEEP_HEAD.to_string();
    for (snr, est, truth) in [(0, 0.6, 0.69), (5, 1.3, 1.43), (10, 2.3, 2.4)] {
        text += &format!("ddime-tilde,1,,{snr},0.5,2,0,0,{est},0,0.1,{truth},0,10,16,5\n");
    }
    write(&csv, &text);
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    write_plot(&csv, PlotKind::Line, &a).unwrap();
    write_plot(&csv, PlotKind::Line, &b).unwrap();
    let svg = std::fs::read_to_string(&a).unwrap();
    assert_eq!(svg, std::fs::read_to_string(&b).unwrap());
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches("stroke-dasharray=\"6 4\"/>").count(), 2, "truth line plus its legend entry");
    assert_eq!(svg.matches("<polygon").count(), 1);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn plot_errors_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    write(&empty, SWEEP_HEAD);
    let out = dir.path().join("out.svg");
    assert!(matches!(write_plot(&empty, PlotKind::Line, &out), Err(HarnessError::EmptyData(_))));
    assert!(!out.exists());

    let missing = dir.path().join("missing.csv");
    write(&missing, "estimator,snr_db,rho\nnwj,0,0.5\n");
    assert!(matches!(
        write_plot(&missing, PlotKind::Line, &out),
        Err(HarnessError::MissingColumn { .. })
    ));
    assert!(matches!(
        write_plot(&missing, PlotKind::Scatter, &out),
        Err(HarnessError::MissingColumn { .. })
    ));
    assert!(!out.exists());
    let status = bin().arg("plot").arg(&empty).arg("-o").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn validate_passes_and_catches_a_sign_error() {
    let report = run_validate(&EstimatorSuite::default());
    assert!(report.passed(), "{report}");
    let broken = EstimatorSuite {
        nwj: |j, m| Ok(-nwj_estimate(j, m)?),
        ..EstimatorSuite::default()
    };
    let report = run_validate(&broken);
    assert!(!report.passed());
    let identity = report.get("identity ddime-tilde(alpha=1) = nwj").unwrap();
    assert!(!identity.passed());
    assert!(identity.error > identity.tolerance);
    let line = identity.to_string();
    assert!(line.starts_with("FAIL") && line.contains("tolerance"));

    let out = bin().arg("validate").output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 30);
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    write(
        &cfg_path,
        "[experiment]\nrepeats = 1\neval_batches = 1\n\n[sweep]\nestimators = [\"mine(ema=0.9)\"]\nsnr_db = [0]\ndim = 1\n\n[train]\niters = 3\nbatch = 8\n",
    );
    let out = dir.path().join("run");
    let status = bin()
        .args(["sweep", "--config"])
        .arg(&cfg_path)
        .args(["--snr-db", "-3,3", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let (_, rows) = read_csv(&out.join(DATA_FILE));
    assert_eq!(rows.iter().map(|r| r[3].as_str()).collect::<Vec<_>>(), ["-3", "3"]);
    let snapshot = ExperimentConfig::parse(&RunManifest::read(&out).unwrap().config).unwrap();
    assert_eq!(snapshot.sweep.snr_db, vec![-3.0, 3.0]);
    assert_eq!(snapshot.sweep.estimators[0].to_string(), "mine(ema=0.9)");

    let status = bin().args(["sweep", "--estimator", "bogus", "--out"]).arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(1));
}
