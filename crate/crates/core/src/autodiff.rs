//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! returns a [`Gradients`] table keyed by [`Var`].
//!
//! Shape rules are deliberately narrow: elementwise ops need identical
//! shapes, `matmul` needs `[m, k] x [k, n]`, and the only broadcast is
//! `add_bias` (`[n, m] + [m]`).

use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

/// Lower clamp applied to the argument of [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("clip bounds out of order: lower {lo} > upper {hi}")]
    InvalidClip { lo: f64, hi: f64 },
    #[error("power normalization of a degenerate batch (zero energy after centering)")]
    DegenerateBatch,
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutogradError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Column vector `[n, 1]` view of a slice, handy for critic outputs.
    pub fn column(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    /// The single value of a scalar (or any one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(AutogradError::NotScalar(self.shape.clone()))
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map_or(1, |(_, c)| c)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        // `v * 0` is NaN exactly when `v` is infinite or NaN; the lane-wise
        // form vectorizes, unlike a short-circuiting scan.
        let mut lanes = [0.0f64; 8];
        let chunks = self.data.chunks_exact(8);
        let rest = chunks.remainder();
        for chunk in chunks {
            for (l, v) in lanes.iter_mut().zip(chunk) {
                *l += v * 0.0;
            }
        }
        lanes.iter().chain(rest).all(|v| (v * 0.0) == 0.0)
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AutogradError::BadShape {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Horizontal concatenation of two `[n, *]` matrices.
    pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ra, ca) = a.dims2().ok_or_else(|| mismatch("concat_cols", a, b))?;
        let (rb, cb) = b.dims2().ok_or_else(|| mismatch("concat_cols", a, b))?;
        if ra != rb {
            return Err(mismatch("concat_cols", a, b));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&a.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&b.data[i * cb..(i + 1) * cb]);
        }
        Ok(Tensor {
            shape: vec![ra, ca + cb],
            data,
        })
    }

    /// Output whose element `k` is `self[indices[k]]` (flat indexing).
    pub fn gather(&self, indices: &[usize], shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(AutogradError::BadShape {
                shape,
                len: indices.len(),
            });
        }
        let mut data = Vec::with_capacity(indices.len());
        for &k in indices {
            let v = self.data.get(k).ok_or_else(|| AutogradError::InvalidArgument {
                op: "gather",
                msg: format!("index {k} out of range for {} elements", self.data.len()),
            })?;
            data.push(*v);
        }
        Ok(Tensor { shape, data })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// `c = a_op * b_op + beta * c` where the operands are described by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the strides above,
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, evaluated without overflow.
pub fn sigmoid(x: f64) -> f64 {
    stable_sigmoid(x)
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    stable_softplus(x)
}

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Mask(usize, Vec<f64>),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Log(usize),
    Exp(usize),
    Clip { x: usize, lo: f64, hi: f64 },
    Mean(usize),
    Sum(usize),
    Scale(usize, f64),
    Offset(usize),
    ConcatCols(usize, usize),
    Gather(usize, Vec<usize>),
    Reshape(usize),
    PowerNormalize { x: usize, gain: f64, energy: f64 },
    LogSumExpRows(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Ordered record of evaluated primitives.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        self.check(var)?;
        Ok(&self.nodes[var.index].value)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, var: Var) -> Result<f64> {
        self.value(var)?.item()
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(AutogradError::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.nodes[i].value.map(f);
        self.push(name, out, op(i))
    }

    fn binary_same_shape(&mut self, name: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape != tb.shape {
            return Err(mismatch(name, ta, tb));
        }
        Ok((ia, ib))
    }

    fn zip_with(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Some(da), Some(db)) if da.1 == db.0 => (da, db),
            _ => return Err(mismatch("matmul", ta, tb)),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, (k as isize, 1), &tb.data, (n as isize, 1), 0.0, &mut out);
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(ia, ib))
    }

    /// `[n, m] + [m]`, the bias row broadcast over every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let ib = self.check(bias)?;
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let (_, m) = tx.dims2().ok_or_else(|| mismatch("add_bias", tx, tb))?;
        if tb.shape != [m] {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data.chunks_exact_mut(m) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        self.push("add_bias", out, Op::AddBias(ix, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("add", a, b)?;
        let out = self.zip_with(ia, ib, |x, y| x + y);
        self.push("add", out, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("sub", a, b)?;
        let out = self.zip_with(ia, ib, |x, y| x - y);
        self.push("sub", out, Op::Sub(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("mul", a, b)?;
        let out = self.zip_with(ia, ib, |x, y| x * y);
        self.push("mul", out, Op::Mul(ia, ib))
    }

    /// Elementwise product with a constant of the same shape; only `x`
    /// receives a gradient. Used for dropout.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        if mask.len() != t.len() {
            return Err(AutogradError::InvalidArgument {
                op: "mask",
                msg: format!("mask of length {} for a tensor of shape {:?}", mask.len(), t.shape),
            });
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        self.push("mask", out, Op::Mask(i, mask))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, stable_sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, stable_softplus, Op::Softplus)
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.max(LOG_FLOOR).ln(), Op::Log)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp)
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the range.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(AutogradError::InvalidClip { lo, hi });
        }
        self.unary("clip", x, |v| v.clamp(lo, hi), |i| Op::Clip { x: i, lo, hi })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        if t.is_empty() {
            return Err(AutogradError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(i))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s = self.nodes[i].value.data.iter().sum::<f64>();
        self.push("sum", Tensor::scalar(s), Op::Sum(i))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * factor, |i| Op::Scale(i, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, shift: f64) -> Result<Var> {
        self.unary("offset", x, |v| v + shift, Op::Offset)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let out = Tensor::concat_cols(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push("concat_cols", out, Op::ConcatCols(ia, ib))
    }

    /// Flat gather; the output takes `shape`, element `k` reads `x[indices[k]]`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.nodes[i].value.gather(&indices, shape)?;
        self.push("gather", out, Op::Gather(i, indices))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.nodes[i].value.clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(i))
    }

    /// Per-column centering followed by a global rescale so that the mean
    /// squared entry of the `[n, d]` output is exactly `power`.
    pub fn power_normalize(&mut self, x: Var, power: f64) -> Result<Var> {
        let i = self.check(x)?;
        if !(power > 0.0 && power.is_finite()) {
            return Err(AutogradError::InvalidArgument {
                op: "power_normalize",
                msg: format!("power must be positive, got {power}"),
            });
        }
        let t = &self.nodes[i].value;
        let (n, d) = t
            .dims2()
            .filter(|&(n, _)| n >= 2)
            .ok_or_else(|| AutogradError::InvalidArgument {
                op: "power_normalize",
                msg: format!("needs an [n >= 2, d] batch, got {:?}", t.shape),
            })?;
        let centered = center_columns(&t.data, n, d);
        let energy = centered.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64;
        if !(energy > f64::MIN_POSITIVE) {
            return Err(AutogradError::DegenerateBatch);
        }
        let gain = (power / energy).sqrt();
        let data = centered.into_iter().map(|v| v * gain).collect();
        self.push(
            "power_normalize",
            Tensor {
                shape: vec![n, d],
                data,
            },
            Op::PowerNormalize { x: i, gain, energy },
        )
    }

    /// Row-wise `ln(sum_j exp(x_ij))` of an `[n, m]` matrix, giving `[n]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        let (n, m) = t.dims2().ok_or_else(|| AutogradError::InvalidArgument {
            op: "logsumexp_rows",
            msg: format!("needs a matrix, got {:?}", t.shape),
        })?;
        let data = t.data.chunks_exact(m).map(logsumexp).collect();
        self.push("logsumexp_rows", Tensor { shape: vec![n], data }, Op::LogSumExpRows(i))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        let out_val = &self.nodes[out].value;
        if out_val.len() != 1 {
            return Err(AutogradError::NotScalar(out_val.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out] = Some(Tensor::full(out_val.shape.clone(), 1.0));

        for idx in (0..=out).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape.clone()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(ia, ib) => {
                let (a, b) = (val(ia), val(ib));
                let (m, k) = a.dims2().expect("matmul lhs");
                let n = b.cols();
                let mut ga = vec![0.0; m * k];
                // dA = G B^T
                gemm(m, n, k, &g.data, (n as isize, 1), &b.data, (1, n as isize), 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                // dB = A^T G
                gemm(k, m, n, &a.data, (1, k as isize), &g.data, (n as isize, 1), 0.0, &mut gb);
                accumulate(grads, ia, Tensor { shape: a.shape.clone(), data: ga });
                accumulate(grads, ib, Tensor { shape: b.shape.clone(), data: gb });
            }
            Op::AddBias(ix, ib) => {
                let m = val(ib).len();
                let mut gb = vec![0.0; m];
                for row in g.data.chunks_exact(m) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, ib, Tensor { shape: vec![m], data: gb });
                accumulate(grads, ix, g);
            }
            Op::Add(ia, ib) => {
                accumulate(grads, ia, g.clone());
                accumulate(grads, ib, g);
            }
            Op::Sub(ia, ib) => {
                accumulate(grads, ib, g.map(|v| -v));
                accumulate(grads, ia, g);
            }
            Op::Mul(ia, ib) => {
                let (a, b) = (val(ia), val(ib));
                accumulate(grads, ia, elementwise(g.clone(), b, |gv, bv| gv * bv));
                accumulate(grads, ib, elementwise(g, a, |gv, av| gv * av));
            }
            Op::Mask(ix, ref mask) => {
                let mut g = g;
                g.data.iter_mut().zip(mask).for_each(|(gv, m)| *gv *= m);
                accumulate(grads, ix, g);
            }
            Op::Relu(ix) => {
                accumulate(grads, ix, elementwise(g, val(ix), |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(ix) => {
                accumulate(grads, ix, elementwise(g, &node.value, |gv, s| gv * s * (1.0 - s)));
            }
            Op::Softplus(ix) => {
                accumulate(grads, ix, elementwise(g, val(ix), |gv, x| gv * stable_sigmoid(x)));
            }
            Op::Log(ix) => {
                accumulate(
                    grads,
                    ix,
                    elementwise(g, val(ix), |gv, x| if x > LOG_FLOOR { gv / x } else { 0.0 }),
                );
            }
            Op::Exp(ix) => {
                accumulate(grads, ix, elementwise(g, &node.value, |gv, e| gv * e));
            }
            Op::Clip { x: ix, lo, hi } => {
                accumulate(
                    grads,
                    ix,
                    elementwise(g, val(ix), |gv, x| if (lo..=hi).contains(&x) { gv } else { 0.0 }),
                );
            }
            Op::Mean(ix) => {
                let x = val(ix);
                let share = g.data[0] / x.len() as f64;
                accumulate(grads, ix, Tensor::full(x.shape.clone(), share));
            }
            Op::Sum(ix) => {
                accumulate(grads, ix, Tensor::full(val(ix).shape.clone(), g.data[0]));
            }
            Op::Scale(ix, c) => {
                let mut g = g;
                g.data.iter_mut().for_each(|v| *v *= c);
                accumulate(grads, ix, g);
            }
            Op::Offset(ix) => accumulate(grads, ix, g),
            Op::ConcatCols(ia, ib) => {
                let (ca, cb) = (val(ia).cols(), val(ib).cols());
                let mut ga = Vec::with_capacity(val(ia).len());
                let mut gb = Vec::with_capacity(val(ib).len());
                for row in g.data.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, ia, Tensor { shape: val(ia).shape.clone(), data: ga });
                accumulate(grads, ib, Tensor { shape: val(ib).shape.clone(), data: gb });
            }
            Op::Gather(ix, ref indices) => {
                let mut gx = Tensor::zeros(val(ix).shape.clone());
                for (&k, gv) in indices.iter().zip(&g.data) {
                    gx.data[k] += gv;
                }
                accumulate(grads, ix, gx);
            }
            Op::Reshape(ix) => {
                let mut gx = g;
                gx.shape = val(ix).shape.clone();
                accumulate(grads, ix, gx);
            }
            Op::PowerNormalize { x: ix, gain, energy } => {
                let x = val(ix);
                let (n, d) = x.dims2().expect("power_normalize input");
                let centered = center_columns(&x.data, n, d);
                let count = (n * d) as f64;
                let proj: f64 = g.data.iter().zip(&centered).map(|(a, b)| a * b).sum();
                let coeff = proj / (energy * count);
                let gc: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&centered)
                    .map(|(gv, c)| gain * (gv - c * coeff))
                    .collect();
                let gx = center_columns(&gc, n, d);
                accumulate(grads, ix, Tensor { shape: vec![n, d], data: gx });
            }
            Op::LogSumExpRows(ix) => {
                let x = val(ix);
                let m = x.cols();
                let mut gx = Vec::with_capacity(x.len());
                for ((row, lse), gv) in x.data.chunks_exact(m).zip(&node.value.data).zip(&g.data) {
                    gx.extend(row.iter().map(|v| gv * (v - lse).exp()));
                }
                accumulate(grads, ix, Tensor { shape: x.shape.clone(), data: gx });
            }
        }
    }
}

fn center_columns(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut means = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(d) {
        out.extend(row.iter().zip(&means).map(|(v, m)| v - m));
    }
    out
}

/// Stabilized `ln(sum(exp(v)))`; `-inf` entries contribute nothing.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Overwrites `g` with `f(g, other)` elementwise.
fn elementwise(mut g: Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    for (a, &b) in g.data.iter_mut().zip(&other.data) {
        *a = f(*a, b);
    }
    g
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Result<&Tensor> {
        if var.tape != self.tape {
            return Err(AutogradError::ForeignVar);
        }
        self.grads
            .get(var.index)
            .and_then(Option::as_ref)
            .ok_or(AutogradError::ForeignVar)
    }

    pub fn take(&mut self, var: Var) -> Result<Tensor> {
        if var.tape != self.tape {
            return Err(AutogradError::ForeignVar);
        }
        self.grads
            .get_mut(var.index)
            .and_then(Option::take)
            .ok_or(AutogradError::ForeignVar)
    }
}

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences. Returns the largest `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(AutogradError::InvalidArgument {
            op: "grad_check",
            msg: format!("step must be positive, got {step}"),
        });
    }
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().cloned().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.item(out)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutogradError::NonFinite { op: "grad_check" })
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().cloned().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0_f64;
    let mut probe = point.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var)?;
        for e in 0..point[p].len() {
            let orig = point[p].data[e];
            probe[p].data[e] = orig + step;
            let up = eval(&probe)?;
            probe[p].data[e] = orig - step;
            let down = eval(&probe)?;
            probe[p].data[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn primitive_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[-1.0, 0.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 0.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).unwrap().data()[1], 0.5);
        let sp = tape.softplus(x).unwrap();
        assert!((tape.value(sp).unwrap().data()[1] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softplus_large_arguments_do_not_overflow() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }

    #[test]
    fn softplus_and_mean_derivatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.softplus(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5]);

        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(x).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn unused_leaves_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]));
        let unused = tape.leaf(Tensor::zeros([3, 2]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros([3, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(AutogradError::NotScalar(_))));
        let other = Tape::new();
        assert_eq!(other.backward(x).unwrap_err(), AutogradError::ForeignVar);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, AutogradError::ShapeMismatch { op: "matmul", .. }));
        let c = tape.leaf(t1(&[1.0]));
        assert!(matches!(
            tape.add(a, c),
            Err(AutogradError::ShapeMismatch { op: "add", .. })
        ));
        assert!(matches!(
            tape.add_bias(a, c),
            Err(AutogradError::ShapeMismatch { op: "add_bias", .. })
        ));
    }

    #[test]
    fn exp_overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1000.0));
        assert_eq!(tape.exp(x).unwrap_err(), AutogradError::NonFinite { op: "exp" });
    }

    #[test]
    fn log_is_clamped() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0, -3.0]));
        let l = tape.log(x).unwrap();
        let expected = LOG_FLOOR.ln();
        assert!(tape.value(l).unwrap().data().iter().all(|&v| v == expected));
    }

    #[test]
    fn clip_rejects_inverted_bounds_and_masks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[-2.0, 0.5, 2.0]));
        assert!(tape.clip(x, 1.0, -1.0).is_err());
        let c = tape.clip(x, -1.0, 1.0).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new([3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn sum_of_squares_grad_check_is_tight() {
        let point = [Tensor::new([2, 2], vec![0.3, -1.2, 2.5, 0.01]).unwrap()];
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn power_normalize_rejects_degenerate_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([4, 2], 3.0));
        assert_eq!(
            tape.power_normalize(x, 1.0).unwrap_err(),
            AutogradError::DegenerateBatch
        );
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new([3, 2], vec![0.1, -0.7, 1.3, 2.2, -0.4, 0.9]).unwrap());
            let w = tape.leaf(Tensor::new([2, 2], vec![0.5, -0.25, 1.5, 0.75]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let s = tape.softplus(h).unwrap();
            let p = tape.power_normalize(s, 2.0).unwrap();
            let l = tape.logsumexp_rows(p).unwrap();
            let m = tape.mean(l).unwrap();
            let g = tape.backward(m).unwrap();
            (tape.item(m).unwrap(), g.get(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
