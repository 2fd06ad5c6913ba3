use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cortical_harness::capacity::run_capacity;
use cortical_harness::config::{EstimatorSpec, ExperimentConfig, ExperimentKind, LatentSpec, Overrides};
use cortical_harness::plot::{write_plot, PlotKind};
use cortical_harness::sweep::run_sweep;
use cortical_harness::validate::{run_validate, EstimatorSuite};

/// Discriminative mutual information estimation and CORTICAL capacity
/// learning experiments.
#[derive(Parser)]
#[command(name = "cortical", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train estimators over a Gaussian SNR (or rho) grid.
    Sweep(RunArgs),
    /// Learn capacity-achieving inputs with CORTICAL over an SNR grid.
    Capacity(RunArgs),
    /// Run the gradient, oracle, bound and identity checks.
    Validate,
    /// Render a CSV produced by `sweep` or `capacity` as SVG.
    Plot {
        /// Input CSV.
        csv: PathBuf,
        /// Output SVG.
        #[arg(short, long)]
        out: PathBuf,
        /// `line` for sweep/capacity tables, `scatter` for constellations.
        #[arg(long, default_value = "line")]
        kind: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Estimators such as `ddime-tilde(alpha=1)`; repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    estimator: Option<Vec<String>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "snr-db", value_delimiter = ',', allow_hyphen_values = true)]
    snr_db: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    rho: Option<Vec<f64>>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seed base; repeat r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long = "eval-batches")]
    eval_batches: Option<usize>,
    /// `gaussian:<dim>` or `discrete:<m>`.
    #[arg(long)]
    latent: Option<String>,
    #[arg(long = "disc-steps")]
    disc_steps: Option<usize>,
    #[arg(long = "gen-iters")]
    gen_iters: Option<usize>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::parse_unchecked(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        let estimators = self
            .estimator
            .as_ref()
            .map(|v| v.iter().map(|s| s.parse::<EstimatorSpec>()).collect::<Result<Vec<_>, _>>())
            .transpose()?;
        let overrides = Overrides {
            estimators,
            alpha: self.alpha,
            tau: self.tau,
            snr_db: self.snr_db.clone(),
            rho: self.rho.clone(),
            dim: self.dim,
            iters: self.iters,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            repeats: self.repeats,
            eval_batches: self.eval_batches,
            out: self.out.clone(),
            latent: self.latent.as_deref().map(str::parse::<LatentSpec>).transpose()?,
            disc_steps: self.disc_steps,
            gen_iters: self.gen_iters,
        };
        cfg.apply(&overrides, kind)?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Sweep(args) => {
            let cfg = args.load(ExperimentKind::EstimatorSweep)?;
            let outcome = run_sweep(&cfg)?;
            for f in outcome.manifest.failures() {
                eprintln!("run {} failed: {}", f.id, f.error.as_deref().unwrap_or(""));
            }
            println!("wrote {} rows to {}", outcome.rows.len(), outcome.data_path.display());
            Ok(!outcome.failed())
        }
        Command::Capacity(args) => {
            let cfg = args.load(ExperimentKind::CapacityRun)?;
            let outcome = run_capacity(&cfg)?;
            for f in outcome.manifest.failures() {
                eprintln!("run {} failed: {}", f.id, f.error.as_deref().unwrap_or(""));
            }
            for row in &outcome.rows {
                let r = &row.report;
                println!(
                    "snr {:>5} dB  repeat {}  tilde {:.4} bits  hat {:.4} bits  reference {:.4} bits",
                    row.snr_db, row.repeat, r.tilde.bits, r.hat.bits, r.reference_bits
                );
            }
            println!("wrote {}", outcome.data_path.display());
            Ok(!outcome.failed())
        }
        Command::Validate => {
            let report = run_validate(&EstimatorSuite::default());
            println!("{report}");
            Ok(report.passed())
        }
        Command::Plot { csv, out, kind } => {
            let kind: PlotKind = kind.parse()?;
            write_plot(&csv, kind, &out)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
    }
}
