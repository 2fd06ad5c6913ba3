//! Experiment configuration files.
//!
//! Files are flat `key = value` text grouped under `[section]` headers (a
//! TOML subset). Every section and key is optional; missing keys take the
//! defaults below, and command-line flags override file values.
//!
//! ```text
//! [experiment]
//! kind = "estimator-sweep"      # estimator-sweep | capacity-run | validate
//! out = "results/sweep"
//! seed_base = 0                 # run r uses seed seed_base + r
//! repeats = 10
//! eval_batches = 10000
//!
//! [sweep]
//! estimators = ["ddime-hat(alpha=1)", "ddime-tilde(alpha=1)", "smile(tau=5)"]
//! snr_db = [-5, 0, 5, 10]       # or rho = [0.0, 0.5]; rho wins when both are set
//! dim = 2
//!
//! [train]
//! iters = 5000
//! batch = 512
//! lr = 0.002
//! beta1 = 0.5
//! beta2 = 0.999
//!
//! [capacity]
//! latent = "gaussian:30"        # or "discrete:8"
//! snr_db = [0, 5, 10]
//! alpha = 1.0
//! disc_steps = 10
//! gen_iters = 500
//! gen_lr = 0.0002
//! disc_lr = 0.002
//! batch = 512
//! constellation_points = 1000
//! psk_draws = 1000000
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cortical_core::cortical::{CorticalConfig, LatentConfig};
use cortical_core::estimators::{EstimatorKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    EstimatorSweep,
    CapacityRun,
    Validate,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::EstimatorSweep => "estimator-sweep",
            ExperimentKind::CapacityRun => "capacity-run",
            ExperimentKind::Validate => "validate",
        })
    }
}

/// An estimator with its parameters, written `name` or `name(key=value)`,
/// e.g. `ddime-tilde(alpha=2)`, `smile(tau=5)`, `mine(ema=0.9)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EstimatorSpec(pub EstimatorKind);

impl FromStr for EstimatorSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, params) = match s.split_once('(') {
            Some((name, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| HarnessError::Config(format!("unclosed parameter list in `{s}`")))?;
                (name.trim(), Some(inner))
            }
            None => (s, None),
        };
        let (mut alpha, mut tau, mut ema) = (None, None, None);
        for pair in params.into_iter().flat_map(|p| p.split(';')).filter(|p| !p.trim().is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("expected key=value in `{s}`")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad number in `{s}`")))?;
            match key.trim() {
                "alpha" => alpha = Some(value),
                "tau" => tau = Some(value),
                "ema" => ema = Some(value),
                other => return Err(HarnessError::Config(format!("unknown estimator parameter `{other}` in `{s}`"))),
            }
        }
        let mut kind = EstimatorKind::from_name(name, alpha, tau)?;
        if let Some(decay) = ema {
            match kind {
                EstimatorKind::Mine { .. } => kind = EstimatorKind::Mine { ema_decay: decay },
                _ => return Err(HarnessError::Config(format!("`ema` only applies to mine, got `{s}`"))),
            }
            kind.validate()?;
        }
        let misplaced = (alpha.is_some() && kind.alpha().is_none()) || (tau.is_some() && kind.tau().is_none());
        if misplaced {
            return Err(HarnessError::Config(format!("parameter does not apply to {name} in `{s}`")));
        }
        Ok(Self(kind))
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            EstimatorKind::Mine { ema_decay } => write!(f, "mine(ema={ema_decay})"),
            kind => write!(f, "{kind}"),
        }
    }
}

impl TryFrom<String> for EstimatorSpec {
    type Error = HarnessError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EstimatorSpec> for String {
    fn from(spec: EstimatorSpec) -> String {
        spec.to_string()
    }
}

/// `gaussian:<dim>` or `discrete:<m>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LatentSpec(pub LatentConfig);

impl FromStr for LatentSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HarnessError::Config(format!("latent must be gaussian:<dim> or discrete:<m>, got `{s}`"));
        let (kind, n) = s.trim().split_once(':').ok_or_else(bad)?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        let latent = match kind.trim() {
            "gaussian" => LatentConfig::Gaussian { dim: n },
            "discrete" => LatentConfig::Discrete { m: n },
            _ => return Err(bad()),
        };
        latent.validate()?;
        Ok(Self(latent))
    }
}

impl fmt::Display for LatentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            LatentConfig::Gaussian { dim } => write!(f, "gaussian:{dim}"),
            LatentConfig::Discrete { m } => write!(f, "discrete:{m}"),
        }
    }
}

impl TryFrom<String> for LatentSpec {
    type Error = HarnessError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LatentSpec> for String {
    fn from(spec: LatentSpec) -> String {
        spec.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub out: PathBuf,
    pub seed_base: u64,
    pub repeats: usize,
    pub eval_batches: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::EstimatorSweep,
            out: PathBuf::from("results"),
            seed_base: 0,
            repeats: 10,
            eval_batches: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub estimators: Vec<EstimatorSpec>,
    pub snr_db: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    pub dim: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            estimators: vec![
                EstimatorSpec(EstimatorKind::DDimeHat { alpha: 1.0 }),
                EstimatorSpec(EstimatorKind::DDimeTilde { alpha: 1.0 }),
            ],
            snr_db: vec![-5.0, 0.0, 5.0, 10.0],
            rho: None,
            dim: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iters: t.iterations,
            batch: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacitySection {
    pub latent: LatentSpec,
    pub snr_db: Vec<f64>,
    pub alpha: f64,
    pub disc_steps: usize,
    pub gen_iters: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub batch: usize,
    pub constellation_points: usize,
    pub psk_draws: usize,
}

impl Default for CapacitySection {
    fn default() -> Self {
        let c = CorticalConfig::continuous(0.0);
        Self {
            latent: LatentSpec(c.latent),
            snr_db: vec![0.0, 5.0, 10.0],
            alpha: c.alpha,
            disc_steps: c.disc_steps,
            gen_iters: c.gen_iterations,
            gen_lr: c.gen_lr,
            disc_lr: c.disc_lr,
            batch: c.batch_size,
            constellation_points: 1000,
            psk_draws: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub sweep: SweepSection,
    pub train: TrainSection,
    pub capacity: CapacitySection,
}

/// One grid point of an estimator sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    /// `None` for rho grids.
    pub snr_db: Option<f64>,
    pub rho: f64,
}

/// Command-line overrides; `None` leaves the file value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub estimators: Option<Vec<EstimatorSpec>>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub snr_db: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
    pub dim: Option<usize>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
    pub eval_batches: Option<usize>,
    pub out: Option<PathBuf>,
    pub latent: Option<LatentSpec>,
    pub disc_steps: Option<usize>,
    pub gen_iters: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_unchecked(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating; sections the run will not read may be
    /// incomplete until [`ExperimentConfig::apply`] checks the result.
    pub fn parse_unchecked(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    /// The config as it would be written to a file.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies overrides for a run of `kind`. Grid and batch flags land in
    /// the section that experiment reads.
    pub fn apply(&mut self, o: &Overrides, kind: ExperimentKind) -> Result<()> {
        self.experiment.kind = kind;
        let e = &mut self.experiment;
        set(&mut e.out, o.out.clone());
        set(&mut e.seed_base, o.seed);
        set(&mut e.repeats, o.repeats);
        set(&mut e.eval_batches, o.eval_batches);
        let s = &mut self.sweep;
        set(&mut s.estimators, o.estimators.clone());
        set(&mut s.dim, o.dim);
        if let Some(alpha) = o.alpha {
            for spec in &mut s.estimators {
                spec.0 = match spec.0 {
                    EstimatorKind::DDimeHat { .. } => EstimatorKind::DDimeHat { alpha },
                    EstimatorKind::DDimeTilde { .. } => EstimatorKind::DDimeTilde { alpha },
                    other => other,
                };
            }
            self.capacity.alpha = alpha;
        }
        if let Some(tau) = o.tau {
            for spec in &mut s.estimators {
                if let EstimatorKind::Smile { .. } = spec.0 {
                    spec.0 = EstimatorKind::Smile { tau };
                }
            }
        }
        if o.rho.is_some() {
            s.rho = o.rho.clone();
        }
        set(&mut self.train.iters, o.iters);
        set(&mut self.train.lr, o.lr);
        let c = &mut self.capacity;
        set(&mut c.latent, o.latent);
        set(&mut c.disc_steps, o.disc_steps);
        set(&mut c.gen_iters, o.gen_iters);
        if kind == ExperimentKind::CapacityRun {
            set(&mut c.snr_db, o.snr_db.clone());
            set(&mut c.batch, o.batch);
            set(&mut c.disc_lr, o.lr);
        } else {
            if o.snr_db.is_some() {
                s.snr_db = o.snr_db.clone().unwrap_or_default();
                if o.rho.is_none() {
                    s.rho = None;
                }
            }
            set(&mut self.train.batch, o.batch);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.experiment.repeats == 0 {
            return bad("repeats must be >= 1".into());
        }
        if self.experiment.eval_batches == 0 {
            return bad("eval_batches must be >= 1".into());
        }
        match self.experiment.kind {
            ExperimentKind::EstimatorSweep => {
                if self.sweep.estimators.is_empty() {
                    return bad("estimator list is empty".into());
                }
                if self.grid().is_empty() {
                    return bad("sweep grid is empty".into());
                }
                if let Some(rho) = self.sweep.rho.as_ref().and_then(|r| r.iter().find(|r| !(r.abs() < 1.0))) {
                    return bad(format!("rho must satisfy |rho| < 1, got {rho}"));
                }
                if self.sweep.snr_db.iter().any(|s| !s.is_finite()) {
                    return bad("SNR values must be finite".into());
                }
                if self.sweep.dim == 0 {
                    return bad("dim must be >= 1".into());
                }
                self.train_config(0).validate()?;
            }
            ExperimentKind::CapacityRun => {
                if self.capacity.snr_db.is_empty() {
                    return bad("capacity SNR grid is empty".into());
                }
                if self.capacity.psk_draws == 0 {
                    return bad("psk_draws must be >= 1".into());
                }
                for &snr in &self.capacity.snr_db {
                    self.cortical_config(snr, 0).validate()?;
                }
            }
            ExperimentKind::Validate => {}
        }
        Ok(())
    }

    /// Sweep grid in file order; a rho grid replaces the SNR grid.
    pub fn grid(&self) -> Vec<GridPoint> {
        match &self.sweep.rho {
            Some(rho) => rho.iter().map(|&rho| GridPoint { snr_db: None, rho }).collect(),
            None => self
                .sweep
                .snr_db
                .iter()
                .map(|&s| GridPoint {
                    snr_db: Some(s),
                    rho: cortical_core::channel::snr_to_rho(s),
                })
                .collect(),
        }
    }

    pub fn seed(&self, repeat: usize) -> u64 {
        self.experiment.seed_base + repeat as u64
    }

    pub fn train_config(&self, repeat: usize) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iters,
            batch_size: self.train.batch,
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            seed: self.seed(repeat),
            eval_batches: self.experiment.eval_batches,
        }
    }

    pub fn cortical_config(&self, snr_db: f64, repeat: usize) -> CorticalConfig {
        let c = &self.capacity;
        let base = match c.latent.0 {
            LatentConfig::Discrete { m } => CorticalConfig::discrete(m, snr_db),
            LatentConfig::Gaussian { dim } => {
                let mut cfg = CorticalConfig::continuous(snr_db);
                cfg.latent = LatentConfig::Gaussian { dim };
                cfg.generator.input_dim = dim;
                cfg
            }
        };
        CorticalConfig {
            alpha: c.alpha,
            disc_steps: c.disc_steps,
            gen_iterations: c.gen_iters,
            gen_lr: c.gen_lr,
            disc_lr: c.disc_lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            batch_size: c.batch,
            seed: self.seed(repeat),
            eval_batches: self.experiment.eval_batches,
            ..base
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_specs_round_trip() {
        for s in ["idime", "ddime-hat(alpha=0.5)", "ddime-tilde(alpha=2)", "mine(ema=0.9)", "nwj", "smile(tau=5)", "infonce"] {
            let spec: EstimatorSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert_eq!("smile".parse::<EstimatorSpec>().unwrap().0, EstimatorKind::Smile { tau: 1.0 });
        assert!("nwj(alpha=1)".parse::<EstimatorSpec>().is_err());
        assert!("smile(tau=-1)".parse::<EstimatorSpec>().is_err());
        assert!("ddime-tilde(alpha=1".parse::<EstimatorSpec>().is_err());
        assert!("bogus".parse::<EstimatorSpec>().is_err());
    }

    #[test]
    fn parses_sections_and_defaults() {
        let cfg = ExperimentConfig::parse(
            "[experiment]\nrepeats = 3\nseed_base = 7\n\n[sweep]\nestimators = [\"nwj\", \"smile(tau=2)\"]\nrho = [0.0, 0.5]\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment.repeats, 3);
        assert_eq!(cfg.seed(2), 9);
        assert_eq!(cfg.grid().len(), 2);
        assert_eq!(cfg.grid()[0].snr_db, None);
        assert_eq!(cfg.train.iters, 5000);
        assert_eq!(cfg.experiment.eval_batches, 10_000);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_invalid_files() {
        assert!(ExperimentConfig::parse("[experiment]\nrepeats = 0\n").is_err());
        assert!(ExperimentConfig::parse("[sweep]\nsnr_db = []\n").is_err());
        assert!(ExperimentConfig::parse("[sweep]\nestimators = []\n").is_err());
        assert!(ExperimentConfig::parse("[sweep]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("[capacity]\nlatent = \"discrete:1\"\n").is_err());
        assert!(ExperimentConfig::parse("[experiment]\nkind = \"capacity-run\"\n[capacity]\nalpha = -1.0\n").is_err());
    }

    #[test]
    fn overrides_target_the_running_experiment() {
        let mut cfg = ExperimentConfig::default();
        let o = Overrides {
            snr_db: Some(vec![3.0]),
            batch: Some(64),
            alpha: Some(2.0),
            ..Default::default()
        };
        cfg.apply(&o, ExperimentKind::CapacityRun).unwrap();
        assert_eq!(cfg.capacity.snr_db, vec![3.0]);
        assert_eq!(cfg.capacity.batch, 64);
        assert_eq!(cfg.sweep.snr_db, vec![-5.0, 0.0, 5.0, 10.0]);
        assert_eq!(cfg.cortical_config(3.0, 0).alpha, 2.0);

        let mut cfg = ExperimentConfig::default();
        cfg.apply(&o, ExperimentKind::EstimatorSweep).unwrap();
        assert_eq!(cfg.sweep.snr_db, vec![3.0]);
        assert_eq!(cfg.train.batch, 64);
        assert_eq!(cfg.sweep.estimators[1].0, EstimatorKind::DDimeTilde { alpha: 2.0 });
    }
}
