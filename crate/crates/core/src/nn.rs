//! Multilayer perceptrons on top of [`crate::autodiff`], plus Adam and the
//! power-normalizing output layer used by generators.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutogradError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input width {got} does not match network input_dim {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("gradient list does not match parameters: {0}")]
    GradientShape(String),
    #[error("non-finite gradient in parameter tensor {tensor}")]
    NonFiniteGradient { tensor: usize },
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Final layer applied after the last affine map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    Linear,
    Sigmoid,
    Softplus,
    /// Linear layer followed by [`power_normalize`] with target power `P`.
    PowerNormalize { power: f64 },
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Linear => f.write_str("linear"),
            Head::Sigmoid => f.write_str("sigmoid"),
            Head::Softplus => f.write_str("softplus"),
            Head::PowerNormalize { power } => write!(f, "power-normalize:{power:?}"),
        }
    }
}

impl FromStr for Head {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Head::Linear),
            "sigmoid" => Ok(Head::Sigmoid),
            "softplus" => Ok(Head::Softplus),
            "power-normalize" => Ok(Head::PowerNormalize { power: 1.0 }),
            other => {
                let power = other
                    .strip_prefix("power-normalize:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| NnError::InvalidSpec(format!("unknown head `{other}`")))?;
                Ok(Head::PowerNormalize { power })
            }
        }
    }
}

/// Architecture of a fully connected ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Dropout rate applied after each hidden layer's activation.
    pub dropout: Vec<f64>,
    pub output_dim: usize,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, head: Head) -> Result<Self> {
        let dropout = vec![0.0; hidden.len()];
        let spec = Self {
            input_dim,
            hidden,
            dropout,
            output_dim,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_dropout(mut self, dropout: Vec<f64>) -> Result<Self> {
        self.dropout = dropout;
        self.validate()?;
        Ok(self)
    }

    /// Two hidden layers of 100 units with 0.3 dropout after the first.
    pub fn discriminator(input_dim: usize, head: Head) -> Self {
        Self {
            input_dim,
            hidden: vec![100, 100],
            dropout: vec![0.3, 0.0],
            output_dim: 1,
            head,
        }
    }

    /// Three hidden layers of 100 units, linear output of width `dim`
    /// followed by power normalization.
    pub fn generator(latent_dim: usize, dim: usize, power: f64) -> Self {
        Self {
            input_dim: latent_dim,
            hidden: vec![100, 100, 100],
            dropout: vec![0.0; 3],
            output_dim: dim,
            head: Head::PowerNormalize { power },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NnError::InvalidSpec(msg));
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return bad(format!(
                "widths must be positive: {} {:?} {}",
                self.input_dim, self.hidden, self.output_dim
            ));
        }
        if self.dropout.len() != self.hidden.len() {
            return bad(format!(
                "{} dropout rates for {} hidden layers",
                self.dropout.len(),
                self.hidden.len()
            ));
        }
        if let Some(r) = self.dropout.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("dropout rate {r} outside [0, 1)"));
        }
        if let Head::PowerNormalize { power } = self.head {
            if !(power > 0.0 && power.is_finite()) {
                return bad(format!("power must be positive, got {power}"));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]`, applied as `x W + b`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trained weights and biases of an [`MlpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    layers: Vec<Layer>,
}

impl NetParams {
    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Weight, bias, weight, bias, ... in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn matches(&self, spec: &MlpSpec) -> bool {
        let dims = spec.layer_dims();
        dims.len() == self.layers.len()
            && dims.iter().zip(&self.layers).all(|(&(i, o), l)| {
                l.weight.shape() == [i, o] && l.bias.shape() == [o]
            })
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Plain-text checkpoint: a `mlp ...` header line, then per layer one line
    /// of row-major weights and one line of biases, 17 significant digits.
    pub fn to_checkpoint(&self, spec: &MlpSpec) -> String {
        let mut out = format!("mlp {}", spec.input_dim);
        for w in &spec.hidden {
            out.push_str(&format!(" {w}"));
        }
        out.push_str(&format!(" {} {}\n", spec.output_dim, spec.head));
        let line = |t: &Tensor| {
            t.data()
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for l in &self.layers {
            out.push_str(&line(&l.weight));
            out.push('\n');
            out.push_str(&line(&l.bias));
            out.push('\n');
        }
        out
    }

    /// Inverse of [`NetParams::to_checkpoint`]. Dropout rates are not stored
    /// and come back as zero.
    pub fn from_checkpoint(text: &str) -> Result<(MlpSpec, NetParams)> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| NnError::Checkpoint {
            line: 1,
            msg: "empty checkpoint".into(),
        })?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        let header_err = |msg: &str| NnError::Checkpoint {
            line: 1,
            msg: msg.to_string(),
        };
        if tokens.len() < 4 || tokens[0] != "mlp" {
            return Err(header_err("expected `mlp <input_dim> <widths...> <output_dim> <head>`"));
        }
        let head: Head = tokens[tokens.len() - 1].parse()?;
        let dims = tokens[1..tokens.len() - 1]
            .iter()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| header_err(&e.to_string()))?;
        let spec = MlpSpec::new(
            dims[0],
            dims[1..dims.len() - 1].to_vec(),
            dims[dims.len() - 1],
            head,
        )?;

        let mut read_line = |expected: usize| -> Result<Vec<f64>> {
            let (idx, line) = lines.next().ok_or_else(|| NnError::Checkpoint {
                line: 0,
                msg: "truncated checkpoint".into(),
            })?;
            let values = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| NnError::Checkpoint {
                    line: idx + 1,
                    msg: e.to_string(),
                })?;
            if values.len() != expected {
                return Err(NnError::Checkpoint {
                    line: idx + 1,
                    msg: format!("expected {expected} values, found {}", values.len()),
                });
            }
            Ok(values)
        };
        let mut layers = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let weight = Tensor::new([fan_in, fan_out], read_line(fan_in * fan_out)?)?;
            let bias = Tensor::new([fan_out], read_line(fan_out)?)?;
            layers.push(Layer { weight, bias });
        }
        Ok((spec, NetParams { layers }))
    }
}

/// Network parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    layers: Vec<(Var, Var)>,
}

impl BoundParams {
    /// Same order as [`NetParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Regroups `[w1, b1, w2, b2, ...]` already on a tape.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.is_empty() || !vars.len().is_multiple_of(2) {
            return Err(NnError::InvalidSpec(format!(
                "expected weight/bias pairs, got {} vars",
                vars.len()
            )));
        }
        Ok(Self {
            layers: vars.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
        })
    }
}

/// Glorot-uniform weights (`±sqrt(6 / (fan_in + fan_out))`), zero biases.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Result<NetParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            Layer {
                weight: Tensor::new([fan_in, fan_out], data).expect("weight shape"),
                bias: Tensor::zeros([fan_out]),
            }
        })
        .collect();
    Ok(NetParams { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Deterministic; dropout disabled.
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub output: Var,
    /// `W_L z_{L-1} + b_L`, the input to the head.
    pub pre_activation: Var,
}

/// Forward pass of an `[n, input_dim]` batch. `rng` is only drawn from for
/// dropout masks in [`Mode::Train`].
pub fn mlp_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &MlpSpec,
    input: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Forward> {
    let width = tape.value(input)?.cols();
    if width != spec.input_dim {
        return Err(NnError::InputWidth {
            expected: spec.input_dim,
            got: width,
        });
    }
    if params.layers.len() != spec.hidden.len() + 1 {
        return Err(NnError::InvalidSpec(format!(
            "{} bound layers for a {}-layer spec",
            params.layers.len(),
            spec.hidden.len() + 1
        )));
    }
    let mut h = input;
    for (&(w, b), &rate) in params.layers.iter().zip(&spec.dropout) {
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        h = tape.relu(z)?;
        if mode == Mode::Train && rate > 0.0 {
            let keep = 1.0 - rate;
            // Keep a unit when a uniform u32 falls below keep * 2^32.
            let threshold = (keep * 4_294_967_296.0) as u64;
            let len = tape.value(h)?.len();
            let mask: Vec<f64> = (0..len)
                .map(|_| if u64::from(rng.next_u32()) < threshold { 1.0 / keep } else { 0.0 })
                .collect();
            h = tape.mask(h, mask)?;
        }
    }
    let &(w, b) = params.layers.last().expect("at least one layer");
    let z = tape.matmul(h, w)?;
    let pre_activation = tape.add_bias(z, b)?;
    let output = match spec.head {
        Head::Linear => pre_activation,
        Head::Sigmoid => tape.sigmoid(pre_activation)?,
        Head::Softplus => tape.softplus(pre_activation)?,
        Head::PowerNormalize { power } => tape.power_normalize(pre_activation, power)?,
    };
    Ok(Forward {
        output,
        pre_activation,
    })
}

/// Eval-mode forward pass outside any caller tape; returns
/// `(output, pre_activation)`.
pub fn mlp_eval(params: &NetParams, spec: &MlpSpec, input: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(input.clone());
    // Eval mode never draws from the generator.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let fwd = mlp_forward(&mut tape, &bound, spec, x, Mode::Eval, &mut unused)?;
    Ok((
        tape.value(fwd.output)?.clone(),
        tape.value(fwd.pre_activation)?.clone(),
    ))
}

/// Centers each column of an `[n, d]` batch and rescales so the mean squared
/// entry equals `power`.
pub fn power_normalize(batch: &Tensor, power: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone());
    let y = tape.power_normalize(x, power)?;
    Ok(tape.value(y)?.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam descent step. On error nothing is modified.
pub fn adam_step(
    params: &mut NetParams,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(NnError::GradientShape(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
        if g.shape() != p.shape() {
            return Err(NnError::GradientShape(format!(
                "tensor {i}: gradient {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient { tensor: i });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        Tensor::new([n, d], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias_and_bounded_weights() {
        let spec = MlpSpec::discriminator(2, Head::Softplus);
        let a = mlp_init(&spec, 0).unwrap();
        assert_eq!(a, mlp_init(&spec, 0).unwrap());
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        let limit = (6.0f64 / 102.0).sqrt();
        let first = &a.layers()[0].weight;
        assert_eq!(first.shape(), &[2, 100]);
        assert!(first.data().iter().all(|w| w.abs() <= limit));
        assert!((limit - 0.2425).abs() < 1e-4);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(0, vec![3], 1, Head::Linear).is_err());
        assert!(MlpSpec::new(2, vec![3, 0], 1, Head::Linear).is_err());
        let spec = MlpSpec::new(2, vec![3], 1, Head::Linear).unwrap();
        assert!(spec.clone().with_dropout(vec![1.0]).is_err());
        assert!(spec.with_dropout(vec![0.5, 0.1]).is_err());
        assert!(MlpSpec::new(2, vec![3], 1, Head::PowerNormalize { power: 0.0 }).is_err());
    }

    #[test]
    fn heads_respect_their_ranges() {
        let x = batch(64, 4, 1);
        for head in [Head::Sigmoid, Head::Softplus] {
            let spec = MlpSpec::discriminator(4, head);
            let mut params = mlp_init(&spec, 3).unwrap();
            for w in params.tensors_mut() {
                w.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            }
            let (out, _) = mlp_eval(&params, &spec, &x).unwrap();
            match head {
                Head::Sigmoid => assert!(out.data().iter().all(|&d| d > 0.0 && d < 1.0)),
                _ => assert!(out.data().iter().all(|&d| d > 0.0)),
            }
        }
    }

    #[test]
    fn softplus_head_at_zero_pre_activation() {
        let spec = MlpSpec::new(3, vec![5], 1, Head::Softplus).unwrap();
        let mut params = mlp_init(&spec, 0).unwrap();
        params.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let (out, pre) = mlp_eval(&params, &spec, &batch(4, 3, 0)).unwrap();
        assert!(pre.data().iter().all(|&p| p == 0.0));
        assert!(out.data().iter().all(|&o| (o - std::f64::consts::LN_2).abs() < 1e-12));
    }

    #[test]
    fn sigmoid_logit_identity() {
        let spec = MlpSpec::discriminator(4, Head::Sigmoid);
        let params = mlp_init(&spec, 9).unwrap();
        let (d, pre) = mlp_eval(&params, &spec, &batch(200, 4, 2)).unwrap();
        for (&dv, &a) in d.data().iter().zip(pre.data()) {
            if (1e-6..=1.0 - 1e-6).contains(&dv) {
                assert!((((1.0 - dv) / dv).ln() + a).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let with = MlpSpec::discriminator(4, Head::Linear);
        let mut without = with.clone();
        without.dropout = vec![0.0, 0.0];
        let params = mlp_init(&with, 5).unwrap();
        let x = batch(32, 4, 7);
        assert_eq!(
            mlp_eval(&params, &with, &x).unwrap(),
            mlp_eval(&params, &without, &x).unwrap()
        );
    }

    #[test]
    fn train_mode_dropout_changes_output() {
        let spec = MlpSpec::discriminator(4, Head::Linear);
        let params = mlp_init(&spec, 5).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(batch(32, 4, 7));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = mlp_forward(&mut tape, &bound, &spec, x, Mode::Train, &mut rng).unwrap();
        let train = tape.value(f.output).unwrap().clone();
        let (eval, _) = mlp_eval(&params, &spec, &batch(32, 4, 7)).unwrap();
        assert_ne!(train, eval);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let spec = MlpSpec::discriminator(4, Head::Linear);
        let params = mlp_init(&spec, 0).unwrap();
        assert!(matches!(
            mlp_eval(&params, &spec, &batch(3, 5, 0)),
            Err(NnError::InputWidth { expected: 4, got: 5 })
        ));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let spec = MlpSpec::new(1, vec![1], 1, Head::Linear).unwrap();
        let mut params = mlp_init(&spec, 0).unwrap();
        let before: Vec<f64> = params.tensors().flat_map(|t| t.data().to_vec()).collect();
        let grads: Vec<Tensor> = params.tensors().map(|t| Tensor::full(t.shape().to_vec(), 1.0)).collect();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::new(0.002)).unwrap();
        let after: Vec<f64> = params.tensors().flat_map(|t| t.data().to_vec()).collect();
        for (b, a) in before.iter().zip(&after) {
            assert!((b - a - 0.002).abs() < 1e-9);
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_and_deterministic() {
        let spec = MlpSpec::new(2, vec![3], 1, Head::Linear).unwrap();
        let params = mlp_init(&spec, 4).unwrap();
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let mut p = params.clone();
        let mut s = AdamState::new(&params);
        adam_step(&mut p, &zeros, &mut s, &AdamConfig::new(0.01)).unwrap();
        assert_eq!(p, params);

        let grads: Vec<Tensor> = params.tensors().map(|t| Tensor::full(t.shape().to_vec(), -0.3)).collect();
        let run = || {
            let mut p = params.clone();
            let mut s = AdamState::new(&params);
            adam_step(&mut p, &grads, &mut s, &AdamConfig::new(0.01)).unwrap();
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradient_without_mutation() {
        let spec = MlpSpec::new(2, vec![3], 1, Head::Linear).unwrap();
        let params = mlp_init(&spec, 4).unwrap();
        let mut grads: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        grads[2].data_mut()[0] = f64::NAN;
        let mut p = params.clone();
        let mut s = AdamState::new(&params);
        let err = adam_step(&mut p, &grads, &mut s, &AdamConfig::new(0.01)).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient { tensor: 2 }));
        assert_eq!(p, params);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn power_normalize_examples() {
        // Centered values with mean square 4 are halved for P = 1.
        let x = Tensor::new([4, 1], vec![2.0, -2.0, 2.0, -2.0]).unwrap();
        let y = power_normalize(&x, 1.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0, 1.0, -1.0]);

        let x = batch(50, 2, 11);
        let y = power_normalize(&x, 1.0).unwrap();
        let ms = y.data().iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        assert!((ms - 1.0).abs() < 1e-12);

        let shifted = Tensor::new([50, 2], x.data().iter().map(|v| v + 7.5).collect()).unwrap();
        let ys = power_normalize(&shifted, 1.0).unwrap();
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn power_normalize_gradient_matches_finite_differences() {
        let point = [batch(6, 2, 3), batch(6, 2, 4)];
        let err = grad_check(
            |tape, v| {
                let y = tape.power_normalize(v[0], 1.7)?;
                let p = tape.mul(y, v[1])?;
                tape.sum(p)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let spec = MlpSpec::generator(3, 2, 1.5);
        let params = mlp_init(&spec, 12).unwrap();
        let text = params.to_checkpoint(&spec);
        assert!(text.starts_with("mlp 3 100 100 100 2 power-normalize:1.5\n"));
        let (spec2, params2) = NetParams::from_checkpoint(&text).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(params2, params);
        assert_eq!(params2.to_checkpoint(&spec2), text);
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let spec = MlpSpec::new(2, vec![3], 1, Head::Sigmoid).unwrap();
        let text = mlp_init(&spec, 1).unwrap().to_checkpoint(&spec);
        let cut: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(NetParams::from_checkpoint(&cut).is_err());
    }
}
