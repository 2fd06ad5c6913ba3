//! Mutual information value functions, estimators and the critic training loop.
//!
//! Everything is in nats. The plain functions below take an [`Expectation`],
//! which is either an empirical sample (uniform weights) or an exact
//! probability-weighted enumeration over a finite alphabet; the latter is how
//! the estimators are checked against [`discrete_mi_oracle`].
//!
//! | kind | critic head | estimate |
//! |------|-------------|----------|
//! | i-DIME | sigmoid | `E_p[log((1 - D) / D)]`, read from the logit |
//! | d-DIME hat | softplus | `E_p[log(D / alpha)]` |
//! | d-DIME tilde | softplus | `J_alpha / alpha + 1 - log(alpha)` |
//! | MINE | linear | `E_p[T] - log E_q[e^T]` |
//! | NWJ | linear | `E_p[T] - E_q[e^(T - 1)]` |
//! | SMILE | linear | `E_p[T] - log E_q[clip(e^T, e^-tau, e^tau)]` |
//! | InfoNCE | linear | `mean_i log(e^T(i,i) / mean_j e^T(i,j))` |
//!
//! `p` is the joint distribution and `q` the product of marginals.

use std::f64::consts::LN_2;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{logsumexp, AutogradError, Tape, Tensor, Var, LOG_FLOOR};
use crate::channel::{ChannelError, Information, JointSource, SampleBatch};
use crate::nn::{
    adam_step, mlp_forward, mlp_init, AdamConfig, AdamState, BoundParams, Forward, Head, MlpSpec, Mode, NetParams,
    NnError,
};

/// Largest argument for which `exp` stays finite.
const EXP_LIMIT: f64 = 709.0;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("{what}: {msg}")]
    OutOfDomain { what: &'static str, msg: String },
    #[error("{kind} needs a {expected} head, got {got}")]
    HeadMismatch { kind: String, expected: Head, got: Head },
    #[error("exp overflow in {what}; clip the critic output or lower the learning rate")]
    Overflow { what: &'static str },
    #[error("non-finite objective at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

fn domain<T>(what: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(EstimatorError::OutOfDomain { what, msg: msg.into() })
}

/// Expectation over a finite set of values, either uniform (a sample) or
/// with explicit probabilities. Zero-probability entries are skipped
/// entirely, so they may hold values such as `-inf` without effect.
#[derive(Debug, Clone, Copy)]
pub struct Expectation<'a> {
    values: &'a [f64],
    weights: Option<&'a [f64]>,
}

impl<'a> Expectation<'a> {
    pub fn empirical(values: &'a [f64]) -> Self {
        Self { values, weights: None }
    }

    pub fn weighted(values: &'a [f64], weights: &'a [f64]) -> Result<Self> {
        if values.len() != weights.len() {
            return domain("expectation", format!("{} values vs {} weights", values.len(), weights.len()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return domain("expectation", "weights must be nonnegative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return domain("expectation", format!("weights sum to {total}"));
        }
        Ok(Self {
            values,
            weights: Some(weights),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(value, probability)` for every entry with positive probability.
    fn support(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.values.len() as f64;
        self.values
            .iter()
            .enumerate()
            .map(move |(i, &v)| (v, self.weights.map_or(1.0 / n, |w| w[i])))
            .filter(|&(_, w)| w > 0.0)
    }

    fn mean_of(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.support().map(|(v, w)| w * f(v)).sum()
    }

    /// `log E[e^v]`, stabilized.
    fn log_mean_exp(&self, f: impl Fn(f64) -> f64) -> f64 {
        let shifted: Vec<f64> = self.support().map(|(v, w)| f(v) + w.ln()).collect();
        logsumexp(&shifted)
    }

    fn require(&self, what: &'static str, ok: impl Fn(f64) -> bool, msg: &str) -> Result<()> {
        if self.is_empty() {
            return domain(what, "no samples");
        }
        match self.support().find(|&(v, _)| !ok(v)) {
            Some((v, _)) => domain(what, format!("{msg}, got {v}")),
            None => Ok(()),
        }
    }
}

impl<'a> From<&'a [f64]> for Expectation<'a> {
    fn from(values: &'a [f64]) -> Self {
        Self::empirical(values)
    }
}

impl<'a> From<&'a Vec<f64>> for Expectation<'a> {
    fn from(values: &'a Vec<f64>) -> Self {
        Self::empirical(values)
    }
}

fn clamped_ln(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

/// GAN value function `E_q[log D] + E_p[log(1 - D)]` for a sigmoid critic.
pub fn idime_value<'a>(d_joint: impl Into<Expectation<'a>>, d_marg: impl Into<Expectation<'a>>) -> Result<f64> {
    let (dj, dm) = (d_joint.into(), d_marg.into());
    let in_unit = |v: f64| v > 0.0 && v < 1.0;
    dj.require("idime_value", in_unit, "joint outputs must lie in (0, 1)")?;
    dm.require("idime_value", in_unit, "marginal outputs must lie in (0, 1)")?;
    Ok(dm.mean_of(clamped_ln) + dj.mean_of(|d| clamped_ln(1.0 - d)))
}

/// i-DIME estimate from the sigmoid head's pre-activations `a` on joint
/// samples: `log((1 - D) / D) = -a`.
pub fn idime_estimate<'a>(pre_activation_joint: impl Into<Expectation<'a>>) -> Result<f64> {
    let a = pre_activation_joint.into();
    a.require("idime_estimate", f64::is_finite, "pre-activations must be finite")?;
    Ok(a.mean_of(|v| -v))
}

/// i-DIME estimate through the probabilities themselves. Agrees with
/// [`idime_estimate`] wherever the sigmoid is not saturated.
pub fn idime_estimate_from_probabilities<'a>(d_joint: impl Into<Expectation<'a>>) -> Result<f64> {
    let d = d_joint.into();
    d.require("idime_estimate", |v| v > 0.0 && v < 1.0, "outputs must lie in (0, 1)")?;
    Ok(d.mean_of(|v| clamped_ln(1.0 - v) - clamped_ln(v)))
}

/// `J_alpha(D) = alpha E_p[log D] - E_q[D]`.
///
/// Joint outputs must be positive; marginal outputs may be zero.
pub fn ddime_value<'a>(
    d_joint: impl Into<Expectation<'a>>,
    d_marg: impl Into<Expectation<'a>>,
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    let (dj, dm) = (d_joint.into(), d_marg.into());
    dj.require("ddime_value", |v| v > 0.0 && v.is_finite(), "joint outputs must be positive")?;
    dm.require("ddime_value", |v| v >= 0.0 && v.is_finite(), "marginal outputs must be nonnegative")?;
    Ok(alpha * dj.mean_of(clamped_ln) - dm.mean_of(|v| v))
}

/// `E_p[log(D / alpha)]`, joint samples only.
pub fn ddime_hat<'a>(d_joint: impl Into<Expectation<'a>>, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let dj = d_joint.into();
    dj.require("ddime_hat", |v| v > 0.0 && v.is_finite(), "outputs must be positive")?;
    Ok(dj.mean_of(clamped_ln) - alpha.ln())
}

/// `J_alpha / alpha + 1 - log(alpha)`; a lower bound on the mutual information.
pub fn ddime_tilde(j_alpha: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(j_alpha / alpha + 1.0 - alpha.ln())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        domain("alpha", format!("must be positive, got {alpha}"))
    }
}

fn critic_ok(v: f64) -> bool {
    !v.is_nan() && v != f64::INFINITY
}

/// Donsker-Varadhan bound `E_p[T] - log E_q[e^T]`.
pub fn mine_value<'a>(t_joint: impl Into<Expectation<'a>>, t_marg: impl Into<Expectation<'a>>) -> Result<f64> {
    let (tj, tm) = (t_joint.into(), t_marg.into());
    tj.require("mine_value", f64::is_finite, "joint critic values must be finite")?;
    tm.require("mine_value", critic_ok, "marginal critic values must not be NaN or +inf")?;
    Ok(tj.mean_of(|v| v) - tm.log_mean_exp(|v| v))
}

/// `E_p[T] - E_q[e^(T - 1)]`.
pub fn nwj_estimate<'a>(t_joint: impl Into<Expectation<'a>>, t_marg: impl Into<Expectation<'a>>) -> Result<f64> {
    let (tj, tm) = (t_joint.into(), t_marg.into());
    tj.require("nwj_estimate", f64::is_finite, "joint critic values must be finite")?;
    tm.require("nwj_estimate", critic_ok, "marginal critic values must not be NaN or +inf")?;
    if tm.support().any(|(v, _)| v - 1.0 > EXP_LIMIT) {
        return Err(EstimatorError::Overflow { what: "nwj_estimate" });
    }
    Ok(tj.mean_of(|v| v) - tm.mean_of(|v| (v - 1.0).exp()))
}

/// `E_p[T] - log E_q[clip(e^T, e^-tau, e^tau)]`. `tau = inf` is MINE.
pub fn smile_estimate<'a>(
    t_joint: impl Into<Expectation<'a>>,
    t_marg: impl Into<Expectation<'a>>,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return domain("smile_estimate", format!("tau must be positive, got {tau}"));
    }
    let (tj, tm) = (t_joint.into(), t_marg.into());
    tj.require("smile_estimate", f64::is_finite, "joint critic values must be finite")?;
    tm.require("smile_estimate", critic_ok, "marginal critic values must not be NaN or +inf")?;
    Ok(tj.mean_of(|v| v) - tm.log_mean_exp(|v| v.clamp(-tau, tau)))
}

/// InfoNCE from a square score matrix `T(x_i, y_j)`. Never exceeds `log n`.
pub fn infonce_estimate(scores: &Tensor) -> Result<f64> {
    let n = match scores.dims2() {
        Some((r, c)) if r == c && r >= 2 => r,
        _ => return domain("infonce_estimate", format!("needs a square n >= 2 matrix, got {:?}", scores.shape())),
    };
    if !scores.is_finite() {
        return domain("infonce_estimate", "scores must be finite");
    }
    let total: f64 = (0..n).map(|i| scores.row(i)[i] - logsumexp(scores.row(i))).sum();
    Ok(total / n as f64 + (n as f64).ln())
}

/// Convex conjugate of `f(u) = -alpha log u`, defined for `t < 0`.
pub fn fenchel_conjugate(t: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(t < 0.0) {
        return domain("fenchel_conjugate", format!("conjugate is +inf for t = {t} >= 0"));
    }
    Ok(-alpha - alpha * (-t / alpha).ln())
}

/// The `u > 0` attaining `sup_u { u t + alpha log u }`.
pub fn fenchel_maximizer(t: f64, alpha: f64) -> Result<f64> {
    fenchel_conjugate(t, alpha)?;
    Ok(-alpha / t)
}

/// Exact quantities of a finite joint distribution, flattened row-major
/// over `(x, y)` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOracle {
    pub rows: usize,
    pub cols: usize,
    pub joint: Vec<f64>,
    /// `p_X(x) p_Y(y)` for every cell.
    pub product: Vec<f64>,
    /// Density ratio `p_XY / (p_X p_Y)`.
    pub ratio: Vec<f64>,
    /// Optimal GAN discriminator `p_X p_Y / (p_XY + p_X p_Y)`.
    pub idime_optimum: Vec<f64>,
    pub mi: Information,
}

impl DiscreteOracle {
    pub fn joint_expectation<'a>(&'a self, values: &'a [f64]) -> Result<Expectation<'a>> {
        Expectation::weighted(values, &self.joint)
    }

    pub fn marginal_expectation<'a>(&'a self, values: &'a [f64]) -> Result<Expectation<'a>> {
        Expectation::weighted(values, &self.product)
    }

    /// `alpha R*`, the maximizer of `J_alpha`.
    pub fn ddime_optimum(&self, alpha: f64) -> Vec<f64> {
        self.ratio.iter().map(|r| alpha * r).collect()
    }

    /// Sigmoid pre-activation of the optimal GAN discriminator, `-log R*`.
    pub fn idime_logits(&self) -> Vec<f64> {
        self.ratio.iter().map(|r| -r.ln()).collect()
    }

    /// `log R*` (`-inf` where the joint has no mass), optimal for MINE and SMILE.
    pub fn log_ratio(&self) -> Vec<f64> {
        self.ratio.iter().map(|r| r.ln()).collect()
    }
}

/// Enumerates a joint probability table (rows index `x`, columns `y`).
pub fn discrete_mi_oracle(table: &[Vec<f64>]) -> Result<DiscreteOracle> {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || table.iter().any(|r| r.len() != cols) {
        return domain("discrete_mi_oracle", "table must be a non-empty rectangle");
    }
    let joint: Vec<f64> = table.iter().flatten().copied().collect();
    if joint.iter().any(|&p| !(p >= 0.0)) {
        return domain("discrete_mi_oracle", "probabilities must be nonnegative");
    }
    let total: f64 = joint.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return domain("discrete_mi_oracle", format!("table sums to {total}"));
    }
    let px: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();

    let mut product = Vec::with_capacity(rows * cols);
    let mut ratio = Vec::with_capacity(rows * cols);
    let mut idime_optimum = Vec::with_capacity(rows * cols);
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            let q = px[i] * py[j];
            product.push(q);
            // Cells outside both supports never enter an expectation.
            let r = if q > 0.0 { p / q } else { 0.0 };
            ratio.push(r);
            idime_optimum.push(if p + q > 0.0 { q / (p + q) } else { 0.5 });
            if p > 0.0 {
                mi += p * (p / q).ln();
            }
        }
    }
    Ok(DiscreteOracle {
        rows,
        cols,
        joint,
        product,
        ratio,
        idime_optimum,
        mi: Information::from_nats(mi),
    })
}

/// Which bound the critic optimizes and how the estimate is read out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorKind {
    IDime,
    DDimeHat { alpha: f64 },
    DDimeTilde { alpha: f64 },
    /// `ema_decay` weights the running partition estimate:
    /// `ema <- decay * ema + (1 - decay) * batch_mean`; `0` gives the raw
    /// (biased) gradient.
    Mine { ema_decay: f64 },
    Nwj,
    Smile { tau: f64 },
    InfoNce,
}

impl EstimatorKind {
    pub const DEFAULT_EMA_DECAY: f64 = 0.99;
    pub const DEFAULT_TAU: f64 = 1.0;

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::IDime => "idime",
            EstimatorKind::DDimeHat { .. } => "ddime-hat",
            EstimatorKind::DDimeTilde { .. } => "ddime-tilde",
            EstimatorKind::Mine { .. } => "mine",
            EstimatorKind::Nwj => "nwj",
            EstimatorKind::Smile { .. } => "smile",
            EstimatorKind::InfoNce => "infonce",
        }
    }

    /// Builds a kind from its name; `alpha`/`tau` fall back to 1.
    pub fn from_name(name: &str, alpha: Option<f64>, tau: Option<f64>) -> Result<Self> {
        let alpha = alpha.unwrap_or(1.0);
        let kind = match name {
            "idime" | "i-dime" => EstimatorKind::IDime,
            "ddime-hat" | "ddime" | "d-dime" => EstimatorKind::DDimeHat { alpha },
            "ddime-tilde" => EstimatorKind::DDimeTilde { alpha },
            "mine" => EstimatorKind::Mine {
                ema_decay: Self::DEFAULT_EMA_DECAY,
            },
            "nwj" => EstimatorKind::Nwj,
            "smile" => EstimatorKind::Smile {
                tau: tau.unwrap_or(Self::DEFAULT_TAU),
            },
            "infonce" => EstimatorKind::InfoNce,
            other => return Err(EstimatorError::InvalidConfig(format!("unknown estimator `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            EstimatorKind::DDimeHat { alpha } | EstimatorKind::DDimeTilde { alpha } => Some(alpha),
            _ => None,
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            EstimatorKind::Smile { tau } => Some(tau),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorKind::DDimeHat { alpha } | EstimatorKind::DDimeTilde { alpha } => check_alpha(alpha),
            EstimatorKind::Smile { tau } if !(tau > 0.0) => {
                Err(EstimatorError::InvalidConfig(format!("tau must be positive, got {tau}")))
            }
            EstimatorKind::Mine { ema_decay } if !(0.0..1.0).contains(&ema_decay) => Err(
                EstimatorError::InvalidConfig(format!("EMA decay must lie in [0, 1), got {ema_decay}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn required_head(&self) -> Head {
        match self {
            EstimatorKind::IDime => Head::Sigmoid,
            EstimatorKind::DDimeHat { .. } | EstimatorKind::DDimeTilde { .. } => Head::Softplus,
            _ => Head::Linear,
        }
    }

    /// The standard critic for this kind over `[x, y]` of width `2 dim`.
    pub fn critic_spec(&self, dim: usize) -> MlpSpec {
        MlpSpec::discriminator(2 * dim, self.required_head())
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())?;
        match *self {
            EstimatorKind::DDimeHat { alpha } | EstimatorKind::DDimeTilde { alpha } => write!(f, "(alpha={alpha})"),
            EstimatorKind::Smile { tau } => write!(f, "(tau={tau})"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Fresh batches used for the post-training evaluation.
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 512,
            lr: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            eval_batches: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size < 2 || !(self.lr > 0.0) || self.eval_batches == 0 {
            return Err(EstimatorError::InvalidConfig(format!(
                "need iterations >= 1, batch >= 2, lr > 0, eval_batches >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single observation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Per-iteration training record plus the post-training evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTrace {
    /// Value function on each training batch.
    pub values: Vec<f64>,
    /// Mutual information readout on each training batch (nats).
    pub estimates: Vec<f64>,
    /// Mean and spread of instantaneous estimates on fresh batches (nats).
    pub eval: Summary,
}

impl EstimateTrace {
    pub fn final_nats(&self) -> f64 {
        self.eval.mean
    }

    pub fn final_bits(&self) -> f64 {
        self.eval.mean / LN_2
    }

    pub fn final_information(&self) -> Information {
        Information::from_nats(self.eval.mean)
    }
}

/// RNG stream used for batches and dropout by the training loops; weight
/// initialization uses [`mlp_init`] on the same seed, a separate stream.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn evaluation_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Tape readings of one objective evaluation.
pub(crate) struct Objective {
    /// Quantity to maximize.
    pub value: Var,
    /// Mutual information readout on this batch.
    pub estimate: f64,
    /// `(hat, tilde)` readouts for d-DIME critics.
    pub ddime: Option<(f64, f64)>,
}

/// `J_alpha` on tape from joint and marginal softplus outputs.
pub(crate) fn ddime_objective(tape: &mut Tape, joint: Forward, marg: Forward, alpha: f64) -> Result<Objective> {
    let log_dj = tape.log(joint.output)?;
    let mean_log = tape.mean(log_dj)?;
    let mean_marg = tape.mean(marg.output)?;
    let scaled = tape.scale(mean_log, alpha)?;
    let value = tape.sub(scaled, mean_marg)?;
    let hat = tape.item(mean_log)? - alpha.ln();
    let tilde = ddime_tilde(tape.item(value)?, alpha)?;
    Ok(Objective {
        value,
        estimate: hat,
        ddime: Some((hat, tilde)),
    })
}

/// Running partition-function average for MINE's gradient correction.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PartitionEma(Option<f64>);

impl PartitionEma {
    fn update(&mut self, batch_mean: f64, decay: f64) -> f64 {
        let next = match self.0 {
            Some(prev) => decay * prev + (1.0 - decay) * batch_mean,
            None => batch_mean,
        };
        self.0 = Some(next);
        next
    }
}

/// Critic outputs on one batch: paired joint/marginal passes, or the full
/// `n x n` score matrix for InfoNCE.
#[derive(Debug, Clone, Copy)]
pub enum CriticOutputs {
    Paired { joint: Forward, marg: Forward },
    Scores(Var),
}

/// Runs the critic on `batch` in the layout `kind` needs.
pub fn critic_outputs(
    tape: &mut Tape,
    bound: &BoundParams,
    spec: &MlpSpec,
    kind: EstimatorKind,
    batch: &SampleBatch,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<CriticOutputs> {
    if kind == EstimatorKind::InfoNce {
        let n = batch.len();
        let (dx, dy) = (batch.x.cols(), batch.y.cols());
        let mut pairs = Vec::with_capacity(n * n * (dx + dy));
        for i in 0..n {
            for j in 0..n {
                pairs.extend_from_slice(batch.x.row(i));
                pairs.extend_from_slice(batch.y.row(j));
            }
        }
        let input = tape.leaf(Tensor::new([n * n, dx + dy], pairs)?);
        let out = mlp_forward(tape, bound, spec, input, mode, rng)?;
        let scores = tape.reshape(out.output, [n, n])?;
        return Ok(CriticOutputs::Scores(scores));
    }
    let joint_in = tape.leaf(batch.joint_input()?);
    let marg_in = tape.leaf(batch.marginal_input()?);
    let joint = mlp_forward(tape, bound, spec, joint_in, mode, rng)?;
    let marg = mlp_forward(tape, bound, spec, marg_in, mode, rng)?;
    Ok(CriticOutputs::Paired { joint, marg })
}

/// The kind's objective on tape. With `ema` present (training), MINE's
/// maximized quantity becomes the bias-corrected surrogate; its reported
/// value stays the plain bound.
fn objective(
    tape: &mut Tape,
    kind: EstimatorKind,
    critic: CriticOutputs,
    ema: Option<&mut PartitionEma>,
) -> Result<(Objective, f64)> {
    let overflow = |what| {
        move |e: AutogradError| match e {
            AutogradError::NonFinite { op: "exp" } => EstimatorError::Overflow { what },
            other => other.into(),
        }
    };
    let (joint, marg) = match critic {
        CriticOutputs::Scores(_) if kind != EstimatorKind::InfoNce => {
            return Err(EstimatorError::InvalidConfig(format!("{kind} needs paired critic outputs")));
        }
        CriticOutputs::Scores(scores) => {
            let n = tape.value(scores)?.rows();
            let mut eye = Tensor::zeros([n, n]);
            for i in 0..n {
                eye.data_mut()[i * n + i] = 1.0;
            }
            let eye = tape.leaf(eye);
            let diag = tape.mul(scores, eye)?;
            let diag_sum = tape.sum(diag)?;
            let diag_mean = tape.scale(diag_sum, 1.0 / n as f64)?;
            let lse = tape.logsumexp_rows(scores)?;
            let lse_mean = tape.mean(lse)?;
            let diff = tape.sub(diag_mean, lse_mean)?;
            let value = tape.offset(diff, (n as f64).ln())?;
            let estimate = tape.item(value)?;
            return Ok((
                Objective {
                    value,
                    estimate,
                    ddime: None,
                },
                estimate,
            ));
        }
        CriticOutputs::Paired { joint, marg } => (joint, marg),
    };

    match kind {
        EstimatorKind::IDime => {
            // log D = -softplus(-a), log(1 - D) = -softplus(a).
            let neg = tape.scale(marg.pre_activation, -1.0)?;
            let sp_marg = tape.softplus(neg)?;
            let sp_joint = tape.softplus(joint.pre_activation)?;
            let m1 = tape.mean(sp_marg)?;
            let m2 = tape.mean(sp_joint)?;
            let total = tape.add(m1, m2)?;
            let value = tape.scale(total, -1.0)?;
            let estimate = idime_estimate(tape.value(joint.pre_activation)?.data())?;
            let reading = tape.item(value)?;
            Ok((
                Objective {
                    value,
                    estimate,
                    ddime: None,
                },
                reading,
            ))
        }
        EstimatorKind::DDimeHat { alpha } | EstimatorKind::DDimeTilde { alpha } => {
            let mut obj = ddime_objective(tape, joint, marg, alpha)?;
            let reading = tape.item(obj.value)?;
            if let EstimatorKind::DDimeTilde { .. } = kind {
                obj.estimate = obj.ddime.expect("d-DIME readouts").1;
            }
            Ok((obj, reading))
        }
        EstimatorKind::Mine { ema_decay } => {
            let mean_joint = tape.mean(joint.output)?;
            let exp_marg = tape.exp(marg.output).map_err(overflow("mine"))?;
            let partition = tape.mean(exp_marg)?;
            let bound = tape.item(mean_joint)? - tape.item(partition)?.ln();
            let value = match ema {
                Some(ema) => {
                    let smoothed = ema.update(tape.item(partition)?, ema_decay);
                    let corrected = tape.scale(partition, 1.0 / smoothed)?;
                    tape.sub(mean_joint, corrected)?
                }
                None => {
                    let log_partition = tape.log(partition)?;
                    tape.sub(mean_joint, log_partition)?
                }
            };
            Ok((
                Objective {
                    value,
                    estimate: bound,
                    ddime: None,
                },
                bound,
            ))
        }
        EstimatorKind::Nwj => {
            let mean_joint = tape.mean(joint.output)?;
            let shifted = tape.offset(marg.output, -1.0)?;
            let e = tape.exp(shifted).map_err(overflow("nwj"))?;
            let mean_e = tape.mean(e)?;
            let value = tape.sub(mean_joint, mean_e)?;
            let v = tape.item(value)?;
            Ok((
                Objective {
                    value,
                    estimate: v,
                    ddime: None,
                },
                v,
            ))
        }
        EstimatorKind::Smile { tau } => {
            let mean_joint = tape.mean(joint.output)?;
            // Clipping e^T to [e^-tau, e^tau] is clipping T to [-tau, tau].
            let clipped = tape.clip(marg.output, -tau, tau)?;
            let e = tape.exp(clipped).map_err(overflow("smile"))?;
            let mean_e = tape.mean(e)?;
            let log_partition = tape.log(mean_e)?;
            let value = tape.sub(mean_joint, log_partition)?;
            let v = tape.item(value)?;
            Ok((
                Objective {
                    value,
                    estimate: v,
                    ddime: None,
                },
                v,
            ))
        }
        EstimatorKind::InfoNce => Err(EstimatorError::InvalidConfig(
            "InfoNCE needs a score matrix, not paired outputs".into(),
        )),
    }
}

/// The kind's value function on tape (MINE without its EMA correction).
/// This is the quantity training ascends.
pub fn objective_value(tape: &mut Tape, kind: EstimatorKind, critic: CriticOutputs) -> Result<Var> {
    kind.validate()?;
    Ok(objective(tape, kind, critic, None)?.0.value)
}

pub(crate) fn check_head(kind: EstimatorKind, spec: &MlpSpec) -> Result<()> {
    let expected = kind.required_head();
    if spec.head != expected {
        return Err(EstimatorError::HeadMismatch {
            kind: kind.to_string(),
            expected,
            got: spec.head,
        });
    }
    Ok(())
}

/// Readings taken on the batch of one ascent step, before the update.
pub(crate) struct StepReading {
    pub value: f64,
    pub estimate: f64,
    pub ddime: Option<(f64, f64)>,
}

/// One Adam ascent step of `params` on the kind's objective.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ascent_step(
    params: &mut NetParams,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    spec: &MlpSpec,
    kind: EstimatorKind,
    batch: &SampleBatch,
    ema: &mut PartitionEma,
    rng: &mut dyn RngCore,
) -> Result<StepReading> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let critic = critic_outputs(&mut tape, &bound, spec, kind, batch, Mode::Train, rng)?;
    let (obj, reading) = objective(&mut tape, kind, critic, Some(ema))?;
    let loss = tape.scale(obj.value, -1.0)?;
    let mut grads = tape.backward(loss)?;
    let grads = bound
        .vars()
        .into_iter()
        .map(|v| grads.take(v))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    adam_step(params, &grads, adam, adam_cfg)?;
    Ok(StepReading {
        value: reading,
        estimate: obj.estimate,
        ddime: obj.ddime,
    })
}

/// Trains a fresh critic against `source` for `cfg.iterations` Adam ascent
/// steps, one fresh batch per step, then evaluates it on
/// `cfg.eval_batches` further batches.
pub fn train_estimator(
    kind: EstimatorKind,
    source: &dyn JointSource,
    spec: &MlpSpec,
    cfg: &TrainConfig,
) -> Result<(NetParams, EstimateTrace)> {
    kind.validate()?;
    cfg.validate()?;
    check_head(kind, spec)?;
    if spec.input_dim != 2 * source.dim() {
        return Err(EstimatorError::InvalidConfig(format!(
            "critic input width {} does not match [x, y] width {}",
            spec.input_dim,
            2 * source.dim()
        )));
    }
    let mut params = mlp_init(spec, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let adam_cfg = cfg.adam();
    let mut rng = training_rng(cfg.seed);
    let mut ema = PartitionEma::default();
    let mut values = Vec::with_capacity(cfg.iterations);
    let mut estimates = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let batch = source.sample(cfg.batch_size, &mut rng)?;
        let StepReading { value, estimate, .. } = ascent_step(
            &mut params, &mut adam, &adam_cfg, spec, kind, &batch, &mut ema, &mut rng,
        )
        .map_err(|e| match e {
            EstimatorError::Autograd(AutogradError::NonFinite { .. }) | EstimatorError::Nn(NnError::NonFiniteGradient { .. }) => {
                EstimatorError::NonFiniteLoss { iteration }
            }
            other => other,
        })?;
        if !value.is_finite() {
            return Err(EstimatorError::NonFiniteLoss { iteration });
        }
        values.push(value);
        estimates.push(estimate);
    }

    let eval = evaluate_estimator(&params, spec, kind, source, cfg.eval_batches, cfg.batch_size, cfg.seed)?;
    Ok((
        params,
        EstimateTrace {
            values,
            estimates,
            eval,
        },
    ))
}

/// Instantaneous single-batch estimate from a trained critic, eval mode.
pub fn instantaneous_estimate(
    params: &NetParams,
    spec: &MlpSpec,
    kind: EstimatorKind,
    batch: &SampleBatch,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let critic = critic_outputs(&mut tape, &bound, spec, kind, batch, Mode::Eval, &mut unused)?;
    let (obj, _) = objective(&mut tape, kind, critic, None)?;
    Ok(obj.estimate)
}

/// Mean and standard deviation of `batches` instantaneous estimates on fresh
/// batches of size `n`. Batches depend only on `seed`, so different kinds
/// evaluated with the same seed see the same data.
pub fn evaluate_estimator(
    params: &NetParams,
    spec: &MlpSpec,
    kind: EstimatorKind,
    source: &dyn JointSource,
    batches: usize,
    n: usize,
    seed: u64,
) -> Result<Summary> {
    check_head(kind, spec)?;
    let mut rng = evaluation_rng(seed);
    let estimates = (0..batches)
        .map(|_| {
            let batch = source.sample(n, &mut rng)?;
            instantaneous_estimate(params, spec, kind, &batch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary::of(&estimates))
}
