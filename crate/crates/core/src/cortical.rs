//! Cooperative capacity learning: a generator shapes the channel input while
//! a d-DIME critic estimates the resulting mutual information. Both ascend
//! the same value function `J_alpha`, so at the joint optimum the tilde
//! readout is the channel capacity.

use std::f64::consts::LN_2;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AutogradError, Tape, Tensor};
use crate::channel::{
    awgn_apply, awgn_noise, derange, derangement_indices, ChannelConfig, ChannelError, DerangeStrategy,
    Information, JointSource, SampleBatch,
};
use crate::estimators::{
    ascent_step, ddime_objective, training_rng, EstimatorError, EstimatorKind, PartitionEma, StepReading,
    Summary,
};
use crate::nn::{
    adam_step, mlp_eval, mlp_forward, mlp_init, AdamConfig, AdamState, Head, MlpSpec, Mode, NetParams, NnError,
};

#[derive(Debug, Error)]
pub enum CorticalError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: J_alpha is not finite")]
    Diverged { step: usize },
    #[error("constellation export is 2-d only, channel has {dim} dimensions")]
    NotTwoDimensional { dim: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, CorticalError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CorticalError::InvalidConfig(msg.into()))
}

/// Distribution of the generator input `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentConfig {
    /// I.i.d. standard normal entries.
    Gaussian { dim: usize },
    /// Base-2 representation of a uniform message in `0..m`, most
    /// significant bit first, width `log2 m`.
    Discrete { m: usize },
}

impl LatentConfig {
    pub fn width(&self) -> usize {
        match *self {
            LatentConfig::Gaussian { dim } => dim,
            LatentConfig::Discrete { m } => m.trailing_zeros() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LatentConfig::Gaussian { dim: 0 } => invalid("gaussian latent needs dim >= 1"),
            LatentConfig::Discrete { m } if m < 2 || !m.is_power_of_two() => {
                invalid(format!("discrete latent needs a power of two m >= 2, got {m}"))
            }
            _ => Ok(()),
        }
    }
}

pub fn latent_sample(cfg: &LatentConfig, n: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
    cfg.validate()?;
    if n < 2 {
        return invalid(format!("latent batch needs n >= 2, got {n}"));
    }
    let width = cfg.width();
    let data = match *cfg {
        LatentConfig::Gaussian { .. } => (0..n * width)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v
            })
            .collect(),
        LatentConfig::Discrete { m } => (0..n)
            .flat_map(|_| {
                let s = rng.random_range(0..m);
                (0..width).rev().map(move |b| ((s >> b) & 1) as f64)
            })
            .collect(),
    };
    Ok(Tensor::new([n, width], data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorticalConfig {
    pub latent: LatentConfig,
    pub generator: MlpSpec,
    pub discriminator: MlpSpec,
    pub alpha: f64,
    /// Discriminator steps per generator step.
    pub disc_steps: usize,
    pub gen_iterations: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub channel: ChannelConfig,
    pub derange: DerangeStrategy,
    pub seed: u64,
    /// Fresh batches averaged for the final readout.
    pub eval_batches: usize,
    /// Skip every generator update, leaving the critic alone to train on
    /// the initial encoder.
    pub generator_frozen: bool,
    /// Critic mode for the generator step and every capacity readout.
    /// [`Mode::Train`] keeps dropout active, so readouts are the same
    /// quantity the critic maximizes; [`Mode::Eval`] reads the
    /// deterministic network, which sits below that bound when the critic
    /// was trained with dropout.
    pub readout_mode: Mode,
}

impl CorticalConfig {
    fn with_latent(latent: LatentConfig, snr_db: f64) -> Self {
        let channel = ChannelConfig::awgn(2, snr_db);
        Self {
            latent,
            generator: MlpSpec::generator(latent.width(), channel.dim, channel.power),
            discriminator: MlpSpec::discriminator(2 * channel.dim, Head::Softplus),
            alpha: 1.0,
            disc_steps: 10,
            gen_iterations: 500,
            gen_lr: 0.0002,
            disc_lr: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 512,
            channel,
            derange: DerangeStrategy::Batch,
            seed: 0,
            eval_batches: 1000,
            generator_frozen: false,
            readout_mode: Mode::Train,
        }
    }

    /// 30-d Gaussian latent over the 2-d AWGN channel.
    pub fn continuous(snr_db: f64) -> Self {
        Self::with_latent(LatentConfig::Gaussian { dim: 30 }, snr_db)
    }

    /// `m`-ary bit-vector latent over the 2-d AWGN channel.
    pub fn discrete(m: usize, snr_db: f64) -> Self {
        Self::with_latent(LatentConfig::Discrete { m }, snr_db)
    }

    pub fn total_disc_steps(&self) -> usize {
        self.disc_steps * self.gen_iterations
    }

    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        self.channel.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.disc_steps == 0 || self.gen_iterations == 0 || self.eval_batches == 0 {
            return invalid("disc_steps, gen_iterations and eval_batches must be >= 1");
        }
        if self.batch_size < 2 {
            return invalid(format!("batch size must be >= 2, got {}", self.batch_size));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return invalid(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.gen_lr > 0.0 && self.disc_lr > 0.0) {
            return invalid("learning rates must be positive");
        }
        let g = &self.generator;
        if g.input_dim != self.latent.width() || g.output_dim != self.channel.dim {
            return invalid(format!(
                "generator maps {} -> {}, expected {} -> {}",
                g.input_dim,
                g.output_dim,
                self.latent.width(),
                self.channel.dim
            ));
        }
        if g.head != (Head::PowerNormalize { power: self.channel.power }) {
            return invalid(format!("generator head must be power-normalize:{}", self.channel.power));
        }
        let d = &self.discriminator;
        if d.input_dim != 2 * self.channel.dim || d.head != Head::Softplus {
            return invalid("discriminator must read [x, y] through a softplus head");
        }
        Ok(())
    }

    /// Initial generator weights (a seed stream apart from the critic's).
    pub fn init_generator(&self) -> Result<NetParams> {
        Ok(mlp_init(&self.generator, self.seed ^ 0x9e37_79b9_7f4a_7c15)?)
    }

    /// Initial critic weights; identical to what `train_estimator` uses for
    /// the same seed.
    pub fn init_discriminator(&self) -> Result<NetParams> {
        Ok(mlp_init(&self.discriminator, self.seed)?)
    }

    fn kind(&self) -> EstimatorKind {
        EstimatorKind::DDimeTilde { alpha: self.alpha }
    }
}

/// Channel samples produced by a fixed generator.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorSource<'a> {
    pub params: &'a NetParams,
    pub spec: &'a MlpSpec,
    pub latent: LatentConfig,
    pub channel: ChannelConfig,
    pub strategy: DerangeStrategy,
}

impl<'a> GeneratorSource<'a> {
    pub fn new(params: &'a NetParams, cfg: &'a CorticalConfig) -> Self {
        Self {
            params,
            spec: &cfg.generator,
            latent: cfg.latent,
            channel: cfg.channel,
            strategy: cfg.derange,
        }
    }

    /// Power-normalized channel inputs for `n` fresh latents.
    pub fn encode(&self, n: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
        let z = latent_sample(&self.latent, n, rng)?;
        Ok(mlp_eval(self.params, self.spec, &z)?.0)
    }
}

impl JointSource for GeneratorSource<'_> {
    fn dim(&self) -> usize {
        self.channel.dim
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> std::result::Result<SampleBatch, ChannelError> {
        let x = self
            .encode(n, rng)
            .map_err(|e| ChannelError::InvalidArgument(format!("generator: {e}")))?;
        let y = awgn_apply(&x, self.channel.sigma2(), self.channel.noise, rng)?;
        let y_perm = derange(&y, self.strategy, rng)?;
        Ok(SampleBatch { x, y, y_perm })
    }
}

/// Channel input and output points.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport {
    pub snr_db: f64,
    pub alpha: f64,
    /// Final readouts averaged over fresh evaluation batches.
    pub hat: Information,
    pub tilde: Information,
    pub hat_std_nats: f64,
    pub tilde_std_nats: f64,
    /// `(d / 2) log2(1 + SNR)`, which is `log2(1 + SNR)` for `d = 2`.
    pub reference_bits: f64,
    /// Hat readout at each generator step (nats).
    pub trace_hat: Vec<f64>,
    /// Tilde readout at each generator step (nats).
    pub trace_tilde: Vec<f64>,
    /// Largest `|mean(x^2) - P|` seen over all training batches.
    pub max_power_error: f64,
    /// One batch of final channel inputs and outputs.
    pub samples: Constellation,
}

impl CapacityReport {
    pub fn reference_nats(&self) -> f64 {
        self.reference_bits * LN_2
    }
}

fn power_error(x: &Tensor, power: f64) -> f64 {
    let mean = x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    (mean - power).abs()
}

/// Hat and tilde readouts of the critic on one batch.
fn batch_readout(
    cfg: &CorticalConfig,
    params: &NetParams,
    batch: &SampleBatch,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let c = params.bind(&mut tape);
    let joint_in = tape.leaf(batch.joint_input()?);
    let marg_in = tape.leaf(batch.marginal_input()?);
    let joint = mlp_forward(&mut tape, &c, &cfg.discriminator, joint_in, cfg.readout_mode, rng)?;
    let marg = mlp_forward(&mut tape, &c, &cfg.discriminator, marg_in, cfg.readout_mode, rng)?;
    let obj = ddime_objective(&mut tape, joint, marg, cfg.alpha)?;
    Ok(obj.ddime.expect("d-DIME readouts"))
}

/// One generator ascent step on `J_alpha` with the critic frozen. Returns
/// the batch's hat and tilde readouts and its power error.
fn generator_step(
    cfg: &CorticalConfig,
    gen: &mut NetParams,
    gen_adam: &mut AdamState,
    gen_cfg: &AdamConfig,
    disc: &NetParams,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let n = cfg.batch_size;
    let d = cfg.channel.dim;
    let mut tape = Tape::new();
    let g = gen.bind(&mut tape);
    let c = disc.bind(&mut tape);
    let z = tape.leaf(latent_sample(&cfg.latent, n, rng)?);
    let x = mlp_forward(&mut tape, &g, &cfg.generator, z, Mode::Train, rng)?.output;
    let noise = awgn_noise(n, d, cfg.channel.sigma2(), cfg.channel.noise, rng)?;
    let idx = derangement_indices(n, d, cfg.derange, rng)?;
    let noise = tape.leaf(noise);
    let y = tape.add(x, noise)?;
    let y_perm = tape.gather(y, idx, [n, d])?;
    let joint_in = tape.concat_cols(x, y)?;
    let marg_in = tape.concat_cols(x, y_perm)?;
    let joint = mlp_forward(&mut tape, &c, &cfg.discriminator, joint_in, cfg.readout_mode, rng)?;
    let marg = mlp_forward(&mut tape, &c, &cfg.discriminator, marg_in, cfg.readout_mode, rng)?;
    let obj = ddime_objective(&mut tape, joint, marg, cfg.alpha)?;
    let (hat, tilde) = obj.ddime.expect("d-DIME readouts");
    let pw = power_error(tape.value(x)?, cfg.channel.power);
    let loss = tape.scale(obj.value, -1.0)?;
    let mut grads = tape.backward(loss)?;
    let grads = g
        .vars()
        .into_iter()
        .map(|v| grads.take(v))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    adam_step(gen, &grads, gen_adam, gen_cfg)?;
    Ok((hat, tilde, pw))
}

/// Alternates `disc_steps` critic ascent steps with one generator ascent
/// step, `gen_iterations` times, then reads out the capacity estimate.
///
/// Returns the trained generator, the trained critic and the report.
pub fn cortical_train(cfg: &CorticalConfig) -> Result<(NetParams, NetParams, CapacityReport)> {
    cfg.validate()?;
    let mut gen = cfg.init_generator()?;
    let mut disc = cfg.init_discriminator()?;
    let mut gen_adam = AdamState::new(&gen);
    let mut disc_adam = AdamState::new(&disc);
    let gen_cfg = AdamConfig {
        lr: cfg.gen_lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    };
    let disc_cfg = AdamConfig {
        lr: cfg.disc_lr,
        ..gen_cfg
    };
    let kind = cfg.kind();
    let mut rng = training_rng(cfg.seed);
    let mut ema = PartitionEma::default();
    let mut trace_hat = Vec::with_capacity(cfg.gen_iterations);
    let mut trace_tilde = Vec::with_capacity(cfg.gen_iterations);
    let mut max_power_error: f64 = 0.0;
    let mut step = 0;

    for _ in 0..cfg.gen_iterations {
        let mut last = None;
        for _ in 0..cfg.disc_steps {
            let source = GeneratorSource::new(&gen, cfg);
            let batch = source.sample(cfg.batch_size, &mut rng)?;
            max_power_error = max_power_error.max(power_error(&batch.x, cfg.channel.power));
            let StepReading { value, ddime, .. } = ascent_step(
                &mut disc, &mut disc_adam, &disc_cfg, &cfg.discriminator, kind, &batch, &mut ema, &mut rng,
            )
            .map_err(|_| CorticalError::Diverged { step })?;
            if !value.is_finite() {
                return Err(CorticalError::Diverged { step });
            }
            step += 1;
            last = ddime;
        }
        let (hat, tilde) = if cfg.generator_frozen {
            // The critic's own training batch, read before its last update.
            last.expect("disc_steps >= 1")
        } else {
            let (hat, tilde, pw) = generator_step(cfg, &mut gen, &mut gen_adam, &gen_cfg, &disc, &mut rng)
                .map_err(|e| match e {
                    CorticalError::Nn(_) | CorticalError::Autograd(_) => CorticalError::Diverged { step },
                    other => other,
                })?;
            max_power_error = max_power_error.max(pw);
            (hat, tilde)
        };
        if !(hat.is_finite() && tilde.is_finite()) {
            return Err(CorticalError::Diverged { step });
        }
        trace_hat.push(hat);
        trace_tilde.push(tilde);
    }

    let (hat, tilde, samples) = final_readout(cfg, &gen, &disc)?;
    let report = CapacityReport {
        snr_db: cfg.channel.snr_db,
        alpha: cfg.alpha,
        hat: Information::from_nats(hat.mean),
        tilde: Information::from_nats(tilde.mean),
        hat_std_nats: hat.std,
        tilde_std_nats: tilde.std,
        reference_bits: cfg.channel.dim as f64 / 2.0 * (10f64.powf(cfg.channel.snr_db / 10.0)).ln_1p() / LN_2,
        trace_hat,
        trace_tilde,
        max_power_error,
        samples,
    };
    Ok((gen, disc, report))
}

fn final_readout(cfg: &CorticalConfig, gen: &NetParams, disc: &NetParams) -> Result<(Summary, Summary, Constellation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let source = GeneratorSource::new(gen, cfg);
    let mut hats = Vec::with_capacity(cfg.eval_batches);
    let mut tildes = Vec::with_capacity(cfg.eval_batches);
    let mut first = None;
    for _ in 0..cfg.eval_batches {
        let batch = source.sample(cfg.batch_size, &mut rng)?;
        let (h, t) = batch_readout(cfg, disc, &batch, &mut rng)?;
        hats.push(h);
        tildes.push(t);
        if first.is_none() {
            first = Some(Constellation {
                x: batch.x,
                y: batch.y,
            });
        }
    }
    Ok((Summary::of(&hats), Summary::of(&tildes), first.expect("eval_batches >= 1")))
}

/// `n` fresh encoder outputs and their noisy channel outputs.
pub fn export_constellation(gen: &NetParams, cfg: &CorticalConfig, n: usize, seed: u64) -> Result<Constellation> {
    if cfg.channel.dim != 2 {
        return Err(CorticalError::NotTwoDimensional { dim: cfg.channel.dim });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let x = GeneratorSource::new(gen, cfg).encode(n, &mut rng)?;
    let y = awgn_apply(&x, cfg.channel.sigma2(), cfg.channel.noise, &mut rng)?;
    Ok(Constellation { x, y })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrete_latent_patterns_are_uniform() {
        let n = 8000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = latent_sample(&LatentConfig::Discrete { m: 8 }, n, &mut rng).unwrap();
        assert_eq!(z.shape(), &[n, 3]);
        let mut counts = [0usize; 8];
        for i in 0..n {
            let r = z.row(i);
            assert!(r.iter().all(|&b| b == 0.0 || b == 1.0));
            counts[(r[0] * 4.0 + r[1] * 2.0 + r[2]) as usize] += 1;
        }
        let tol = 3.0 / (n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.125).abs() < tol);
        }
    }

    #[test]
    fn gaussian_latent_is_centered_and_reproducible() {
        let n = 4000;
        let cfg = LatentConfig::Gaussian { dim: 30 };
        let z = latent_sample(&cfg, n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for j in 0..30 {
            let mean = (0..n).map(|i| z.row(i)[j]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        }
        let again = latent_sample(&cfg, n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn latent_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(latent_sample(&LatentConfig::Discrete { m: 6 }, 4, &mut rng).is_err());
        assert!(latent_sample(&LatentConfig::Gaussian { dim: 0 }, 4, &mut rng).is_err());
        assert!(latent_sample(&LatentConfig::Gaussian { dim: 2 }, 1, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CorticalConfig::continuous(5.0).validate().is_ok());
        assert_eq!(CorticalConfig::continuous(5.0).total_disc_steps(), 5000);
        let mut cfg = CorticalConfig::discrete(8, 10.0);
        assert_eq!(cfg.generator.input_dim, 3);
        cfg.disc_steps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = CorticalConfig::continuous(0.0);
        cfg.discriminator = MlpSpec::discriminator(4, Head::Sigmoid);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn export_rejects_non_planar_channels() {
        let mut cfg = CorticalConfig::continuous(0.0);
        cfg.channel.dim = 3;
        cfg.generator = MlpSpec::generator(30, 3, 1.0);
        cfg.discriminator = MlpSpec::discriminator(6, Head::Softplus);
        let gen = cfg.init_generator().unwrap();
        assert!(matches!(
            export_constellation(&gen, &cfg, 16, 0),
            Err(CorticalError::NotTwoDimensional { dim: 3 })
        ));
    }

    #[test]
    fn noiseless_export_repeats_inputs() {
        let mut cfg = CorticalConfig::continuous(0.0);
        cfg.channel.snr_db = f64::INFINITY;
        let gen = cfg.init_generator().unwrap();
        let c = export_constellation(&gen, &cfg, 256, 3).unwrap();
        assert_eq!(c.x, c.y);
        assert!(power_error(&c.x, 1.0) < 1e-10);
    }
}
