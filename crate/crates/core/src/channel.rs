//! Sources, channels and closed-form references.
//!
//! All noise and latent draws go through an explicit RNG, so every batch is
//! a pure function of the seed.

use std::f64::consts::{LN_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{logsumexp, AutogradError, Tensor};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ChannelError::InvalidArgument(msg.into()))
}

/// A mutual information value carried in both units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Information {
    pub nats: f64,
    pub bits: f64,
}

impl Information {
    pub fn from_nats(nats: f64) -> Self {
        Self {
            nats,
            bits: nats / LN_2,
        }
    }

    pub fn from_bits(bits: f64) -> Self {
        Self {
            nats: bits * LN_2,
            bits,
        }
    }
}

/// Noise variance for a given SNR (dB) and signal power.
pub fn snr_to_sigma2(snr_db: f64, power: f64) -> f64 {
    power * 10f64.powf(-snr_db / 10.0)
}

/// Correlation coefficient of a unit-power Gaussian pair seen through AWGN.
pub fn snr_to_rho(snr_db: f64) -> f64 {
    (1.0 / (1.0 + snr_to_sigma2(snr_db, 1.0))).sqrt()
}

/// Inverse of [`snr_to_rho`]; `-inf` for `rho = 0`.
pub fn rho_to_snr_db(rho: f64) -> f64 {
    let r2 = rho * rho;
    10.0 * (r2 / (1.0 - r2)).log10()
}

/// `I(X;Y) = -(d/2) log(1 - rho^2)` for `d` i.i.d. correlated component pairs.
pub fn gaussian_mi(dim: usize, rho: f64) -> Result<Information> {
    if !(rho.abs() < 1.0) {
        return invalid(format!("|rho| must be < 1, got {rho}"));
    }
    // `+ 0.0` turns the -0 at rho = 0 into 0.
    let bits = -(dim as f64 / 2.0) * (1.0 - rho * rho).log2() + 0.0;
    Ok(Information::from_bits(bits))
}

/// `log2(1 + SNR)`, bits per complex channel use.
pub fn awgn_capacity(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0).ln_1p() / LN_2
}

/// How a total noise variance `sigma^2` is spread over real dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseConvention {
    /// Interleaved (re, im) pairs; each real dimension gets `sigma^2 / 2`.
    #[default]
    Complex,
    /// Every real dimension gets `sigma^2`.
    Real,
}

impl NoiseConvention {
    pub fn per_dimension_variance(self, sigma2: f64) -> f64 {
        match self {
            NoiseConvention::Complex => sigma2 / 2.0,
            NoiseConvention::Real => sigma2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// Real dimensions per channel use.
    pub dim: usize,
    pub snr_db: f64,
    /// Mean squared value per real dimension of the channel input.
    pub power: f64,
    pub noise: NoiseConvention,
}

impl ChannelConfig {
    /// Real-valued AWGN where each of the `dim` dimensions sees the stated
    /// SNR. For `dim = 2` the capacity is `log2(1 + SNR)`.
    pub fn awgn(dim: usize, snr_db: f64) -> Self {
        Self {
            dim,
            snr_db,
            power: 1.0,
            noise: NoiseConvention::Real,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return invalid("channel dimension must be at least 1");
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return invalid(format!("power must be positive, got {}", self.power));
        }
        if self.snr_db.is_nan() {
            return invalid("snr_db is NaN");
        }
        Ok(())
    }

    pub fn sigma2(&self) -> f64 {
        snr_to_sigma2(self.snr_db, self.power)
    }
}

/// Joint samples `(x, y)` and their product-of-marginals counterpart `(x, y_perm)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub y_perm: Tensor,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[x, y]` rows fed to a joint critic.
    pub fn joint_input(&self) -> Result<Tensor> {
        Ok(Tensor::concat_cols(&self.x, &self.y)?)
    }

    /// `[x, y_perm]` rows.
    pub fn marginal_input(&self) -> Result<Tensor> {
        Ok(Tensor::concat_cols(&self.x, &self.y_perm)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerangeStrategy {
    /// Cyclic shift of the rows by a random offset in `1..n`.
    #[default]
    Batch,
    /// Derangement of the `d` entries inside each row.
    WithinSample,
}

/// Flat gather indices implementing the chosen derangement of an `[n, d]`
/// matrix: output element `k` reads input element `indices[k]`.
pub fn derangement_indices(
    n: usize,
    d: usize,
    strategy: DerangeStrategy,
    rng: &mut dyn RngCore,
) -> Result<Vec<usize>> {
    match strategy {
        DerangeStrategy::Batch => {
            if n < 2 {
                return invalid(format!("batch derangement needs n >= 2, got {n}"));
            }
            let shift = rng.random_range(1..n);
            Ok((0..n)
                .flat_map(|i| {
                    let src = (i + shift) % n;
                    (0..d).map(move |j| src * d + j)
                })
                .collect())
        }
        DerangeStrategy::WithinSample => {
            if d < 2 {
                return invalid(format!("within-sample derangement needs d >= 2, got {d}"));
            }
            let mut out = Vec::with_capacity(n * d);
            let mut perm: Vec<usize> = (0..d).collect();
            for i in 0..n {
                loop {
                    perm.shuffle(rng);
                    if perm.iter().enumerate().all(|(j, &p)| j != p) {
                        break;
                    }
                }
                out.extend(perm.iter().map(|&p| i * d + p));
            }
            Ok(out)
        }
    }
}

/// Permutes `y` so that no row keeps its pairing.
pub fn derange(y: &Tensor, strategy: DerangeStrategy, rng: &mut dyn RngCore) -> Result<Tensor> {
    let (n, d) = y
        .dims2()
        .ok_or_else(|| ChannelError::InvalidArgument(format!("expected a matrix, got {:?}", y.shape())))?;
    let idx = derangement_indices(n, d, strategy, rng)?;
    Ok(y.gather(&idx, [n, d])?)
}

fn normal(rng: &mut dyn RngCore) -> f64 {
    StandardNormal.sample(rng)
}

/// Zero-mean Gaussian noise of shape `[n, d]`.
pub fn awgn_noise(
    n: usize,
    d: usize,
    sigma2: f64,
    noise: NoiseConvention,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    if !(sigma2 >= 0.0) {
        return invalid(format!("noise variance must be >= 0, got {sigma2}"));
    }
    let std = noise.per_dimension_variance(sigma2).sqrt();
    let data = (0..n * d).map(|_| std * normal(rng)).collect();
    Ok(Tensor::new([n, d], data)?)
}

/// `y = x + n`.
pub fn awgn_apply(x: &Tensor, sigma2: f64, noise: NoiseConvention, rng: &mut dyn RngCore) -> Result<Tensor> {
    let (n, d) = x
        .dims2()
        .ok_or_else(|| ChannelError::InvalidArgument(format!("expected a matrix, got {:?}", x.shape())))?;
    let mut y = awgn_noise(n, d, sigma2, noise, rng)?;
    for (v, xv) in y.data_mut().iter_mut().zip(x.data()) {
        *v += xv;
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSourceConfig {
    pub dim: usize,
    /// Per-component correlation between `x_i` and `y_i`.
    pub rho: f64,
}

impl GaussianSourceConfig {
    pub fn from_snr(dim: usize, snr_db: f64) -> Self {
        Self {
            dim,
            rho: snr_to_rho(snr_db),
        }
    }

    pub fn mutual_information(&self) -> Result<Information> {
        gaussian_mi(self.dim, self.rho)
    }
}

/// `x ~ N(0, I)`, `y = rho x + sqrt(1 - rho^2) n`, plus the deranged `y`.
pub fn gaussian_pair_batch(
    cfg: &GaussianSourceConfig,
    n: usize,
    strategy: DerangeStrategy,
    rng: &mut dyn RngCore,
) -> Result<SampleBatch> {
    if n < 2 {
        return invalid(format!("batch size must be >= 2, got {n}"));
    }
    if cfg.dim == 0 || !(cfg.rho.abs() < 1.0) {
        return invalid(format!("invalid Gaussian source {cfg:?}"));
    }
    let d = cfg.dim;
    let noise_scale = (1.0 - cfg.rho * cfg.rho).sqrt();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let xv = normal(rng);
        x.push(xv);
        y.push(cfg.rho * xv + noise_scale * normal(rng));
    }
    let x = Tensor::new([n, d], x)?;
    let y = Tensor::new([n, d], y)?;
    let y_perm = derange(&y, strategy, rng)?;
    Ok(SampleBatch { x, y, y_perm })
}

/// Anything that produces paired channel samples.
pub trait JointSource {
    /// Real dimensions of `x` (and of `y`).
    fn dim(&self) -> usize;

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<SampleBatch>;

    /// Ground-truth mutual information when it is known in closed form.
    fn true_mi(&self) -> Option<Information> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSource {
    pub config: GaussianSourceConfig,
    pub strategy: DerangeStrategy,
}

impl GaussianSource {
    pub fn new(config: GaussianSourceConfig) -> Self {
        Self {
            config,
            strategy: DerangeStrategy::Batch,
        }
    }
}

impl JointSource for GaussianSource {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<SampleBatch> {
        gaussian_pair_batch(&self.config, n, self.strategy, rng)
    }

    fn true_mi(&self) -> Option<Information> {
        self.config.mutual_information().ok()
    }
}

/// `m` points on a circle, scaled so each of the two real dimensions has
/// mean square `power` (radius `sqrt(2 power)`).
pub fn psk_points(m: usize, power: f64) -> Vec<[f64; 2]> {
    let radius = (2.0 * power).sqrt();
    (0..m)
        .map(|k| {
            let phase = 2.0 * PI * k as f64 / m as f64;
            [radius * phase.cos(), radius * phase.sin()]
        })
        .collect()
}

/// Uniform `m`-PSK symbols through the configured 2-d AWGN channel; a fixed
/// (untrained) reference encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PskSource {
    pub m: usize,
    pub channel: ChannelConfig,
    pub strategy: DerangeStrategy,
}

impl JointSource for PskSource {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<SampleBatch> {
        if self.channel.dim != 2 || self.m < 2 {
            return invalid("PSK source needs a 2-d channel and m >= 2");
        }
        let points = psk_points(self.m, self.channel.power);
        let data = (0..n).flat_map(|_| points[rng.random_range(0..self.m)]).collect();
        let x = Tensor::new([n, 2], data)?;
        let y = awgn_apply(&x, self.channel.sigma2(), self.channel.noise, rng)?;
        let y_perm = derange(&y, self.strategy, rng)?;
        Ok(SampleBatch { x, y, y_perm })
    }
}

/// Monte-Carlo mutual information of equiprobable `m`-PSK over the given
/// 2-d AWGN channel, using `draws` noise realizations in total.
///
/// `I = log m - E[log sum_j exp(-(|x_i + n - x_j|^2 - |n|^2) / (2 s^2))]`
/// with `s^2` the per-dimension noise variance.
pub fn psk_mutual_information(m: usize, channel: &ChannelConfig, draws: usize, seed: u64) -> Result<Information> {
    channel.validate()?;
    if channel.dim != 2 || m < 2 || draws < m {
        return invalid("PSK mutual information needs a 2-d channel, m >= 2 and draws >= m");
    }
    let points = psk_points(m, channel.power);
    let var = channel.noise.per_dimension_variance(channel.sigma2());
    let std = var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_symbol = draws / m;
    let mut acc = 0.0;
    let mut exps = vec![0.0; m];
    for xi in &points {
        for _ in 0..per_symbol {
            let n = [std * normal(&mut rng), std * normal(&mut rng)];
            let n2 = n[0] * n[0] + n[1] * n[1];
            for (e, xj) in exps.iter_mut().zip(&points) {
                let dx = xi[0] + n[0] - xj[0];
                let dy = xi[1] + n[1] - xj[1];
                *e = -((dx * dx + dy * dy) - n2) / (2.0 * var);
            }
            acc += logsumexp(&exps);
        }
    }
    let nats = (m as f64).ln() - acc / (per_symbol * m) as f64;
    Ok(Information::from_nats(nats))
}
