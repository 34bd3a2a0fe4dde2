//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape. Every operation evaluates eagerly and, when the graph
//! is recording and at least one input is tracked, appends a node holding the
//! inputs it needs for its adjoint rule. [`Graph::backward`] walks the tape in
//! reverse exactly once per call.
//!
//! Graphs built with [`Graph::inference`] never record, so intermediate values
//! are released as soon as their [`Var`] handles drop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::kernels::{self, conv_out_len, gemm_acc, same_pad, sigmoid};
use crate::tensor::{axis_extents, strides, Tensor};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// A value flowing through a [`Graph`]. Cloning is cheap.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    id: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    /// Whether gradients flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }
}

/// A trainable weight shared between a model and the graphs that read it.
#[derive(Clone, Debug, PartialEq)]
pub struct Param(Rc<Tensor>);

impl Param {
    pub fn new(t: Tensor) -> Self {
        Self(Rc::new(t))
    }

    pub fn value(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.numel()
    }

    /// Mutable access; copies only if a live graph still holds the weight.
    pub fn make_mut(&mut self) -> &mut Tensor {
        Rc::make_mut(&mut self.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

/// Convolution flavours for [`Graph::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// One filter per channel; weight `[k, c]`.
    Depthwise,
    /// Kernel size 1 channel mixing; weight `[1, c_in, c_out]`.
    Pointwise,
    /// Full kernel; weight `[k, c_in, c_out]`.
    Dense,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sigmoid(Var),
    Swish(Var),
    Glu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Pad {
        x: Var,
        axis: usize,
        before: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        step: usize,
    },
    Sum(Var),
    Mean(Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        depthwise: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    AvgPool(Var, usize),
    External(Var, Vec<f64>),
}

impl Op {
    fn inputs(&self) -> Vec<&Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Bmm(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![a, b]
            }
            Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Swish(x)
            | Op::Glu(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Pad { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::AvgPool(x, _)
            | Op::External(x, _) => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Conv1d { x, w, .. } | Op::Conv2d { x, w, .. } => vec![x, w],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Rc<Tensor>,
}

/// Operation tape plus a multiply-add counter for the matmul/conv kernels.
#[derive(Debug)]
pub struct Graph {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<usize, Var>>,
    madds: Cell<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            recording: true,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            madds: Cell::new(0),
        }
    }

    /// A graph that evaluates but never records.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Multiply-adds executed by matmul and convolution kernels so far.
    pub fn madds(&self) -> u64 {
        self.madds.get()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn count(&self, n: usize) {
        self.madds.set(self.madds.get() + n as u64);
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        let value = Rc::new(t);
        if !self.recording {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value: value.clone(),
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            value: Rc::new(t),
            id: None,
        }
    }

    /// Binds a model weight as a leaf; repeated calls return the same handle.
    pub fn param(&self, p: &Param) -> Var {
        if !self.recording {
            return Var {
                value: p.0.clone(),
                id: None,
            };
        }
        if let Some(v) = self.params.borrow().get(&p.key()) {
            return v.clone();
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value: p.0.clone(),
        });
        let v = Var {
            value: p.0.clone(),
            id: Some(nodes.len() - 1),
        };
        self.params.borrow_mut().insert(p.key(), v.clone());
        v
    }

    fn record(&self, value: Tensor, op: Op) -> Var {
        let value = Rc::new(value);
        if !self.recording || !op.inputs().iter().any(|v| v.is_tracked()) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: value.clone(),
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m×k] · [k×p] → [m×p]`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        gemm_acc(&mut out, a.data(), b.data(), m, k, p, false, false);
        self.count(m * k * p);
        let t = Tensor::new(&[m, p], out)?;
        Ok(self.record(t, Op::MatMul(a.clone(), b.clone())))
    }

    /// Batched `[b×m×k] · [b×k×p] → [b×m×p]`.
    pub fn bmm(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err("bmm", sa, sb));
        }
        let (bt, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * p];
        for i in 0..bt {
            gemm_acc(
                &mut out[i * m * p..(i + 1) * m * p],
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * p..(i + 1) * k * p],
                m,
                k,
                p,
                false,
                false,
            );
        }
        self.count(bt * m * k * p);
        let t = Tensor::new(&[bt, m, p], out)?;
        Ok(self.record(t, Op::Bmm(a.clone(), b.clone())))
    }

    /// `x · W (+ b)` for `x: [n×d_in]`, `W: [d_in×d_out]`, `b: [d_out]`.
    pub fn linear(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(&y, b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(dim_err(op, a.shape(), b.shape()));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(a.shape(), data)?;
        Ok(self.record(t, Op::Add(a.clone(), b.clone())))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(a.shape(), data)?;
        Ok(self.record(t, Op::Mul(a.clone(), b.clone())))
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let t = Tensor::from_fn(a.shape(), |i| a.data()[i] * c);
        self.record(t, Op::Scale(a.clone(), c))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&self, x: &Var, b: &Var) -> Result<Var> {
        let c = *x.shape().last().unwrap_or(&0);
        if b.shape() != [c] {
            return Err(dim_err("add_bias", x.shape(), b.shape()));
        }
        let bd = b.data();
        let t = Tensor::from_fn(x.shape(), |i| x.data()[i] + bd[i % c]);
        Ok(self.record(t, Op::AddBias(x.clone(), b.clone())))
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        let t = Tensor::from_fn(x.shape(), |i| sigmoid(x.data()[i]));
        self.record(t, Op::Sigmoid(x.clone()))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&self, x: &Var) -> Var {
        let t = Tensor::from_fn(x.shape(), |i| {
            let v = x.data()[i];
            v * sigmoid(v)
        });
        self.record(t, Op::Swish(x.clone()))
    }

    /// Gated linear unit over the last axis: `a ⊙ sigmoid(b)` for `x = a ‖ b`.
    pub fn glu(&self, x: &Var) -> Result<Var> {
        let shape = x.shape();
        let last = *shape.last().unwrap_or(&0);
        if last == 0 || !last.is_multiple_of(2) {
            return Err(dim_err("glu", shape, &[last]));
        }
        let c = last / 2;
        let rows = x.value().numel() / last;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = c;
        let xd = x.data();
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] = xd[r * last + j] * sigmoid(xd[r * last + c + j]);
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.record(t, Op::Glu(x.clone())))
    }

    /// Bernoulli dropout with inverted scaling; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: &Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x.clone());
        }
        if p >= 1.0 {
            return Err(config_err(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(x.shape(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
        self.mul(x, &self.constant(mask))
    }

    // ---------------------------------------------------------------- normalization

    fn check_axis(op: &'static str, x: &Var, axis: usize) -> Result<()> {
        if axis >= x.shape().len() || x.shape()[axis] == 0 {
            return Err(dim_err(op, x.shape(), &[axis]));
        }
        Ok(())
    }

    pub fn softmax(&self, x: &Var, axis: usize) -> Result<Var> {
        Self::check_axis("softmax", x, axis)?;
        let (o, l, i) = axis_extents(x.shape(), axis);
        let mut out = vec![0.0; x.value().numel()];
        kernels::softmax(x.data(), &mut out, o, l, i);
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.record(t, Op::Softmax(x.clone(), axis)))
    }

    pub fn log_softmax(&self, x: &Var, axis: usize) -> Result<Var> {
        Self::check_axis("log_softmax", x, axis)?;
        let (o, l, i) = axis_extents(x.shape(), axis);
        let mut out = vec![0.0; x.value().numel()];
        kernels::log_softmax(x.data(), &mut out, o, l, i);
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.record(t, Op::LogSoftmax(x.clone(), axis)))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(dim_err("layer_norm", x.shape(), &[0]));
        }
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(dim_err("layer_norm", x.shape(), gamma.shape()));
        }
        let rows = x.value().numel() / d;
        let (xhat, rstd) = kernels::layer_norm_stats(x.data(), rows, d, LN_EPS);
        let (gd, bd) = (gamma.data(), beta.data());
        let t = Tensor::from_fn(x.shape(), |i| xhat[i] * gd[i % d] + bd[i % d]);
        Ok(self.record(
            t,
            Op::LayerNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                rstd,
            },
        ))
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let t = x.to_tensor().reshaped(shape)?;
        Ok(self.record(t, Op::Reshape(x.clone())))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, x: &Var, axes: &[usize]) -> Result<Var> {
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || core::mem::replace(&mut seen[a], true)) {
            return Err(dim_err("permute", x.shape(), axes));
        }
        let map = permute_map(x.shape(), axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let xd = x.data();
        let t = Tensor::new(&out_shape, map.iter().map(|&s| xd[s]).collect())?;
        Ok(self.record(t, Op::Permute(x.clone(), axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: &Var) -> Result<Var> {
        let rank = x.shape().len();
        if rank < 2 {
            return Err(dim_err("transpose", x.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    /// Zero-pads `axis` with `before`/`after` entries.
    pub fn pad(&self, x: &Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        if axis >= x.shape().len() {
            return Err(dim_err("pad", x.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_extents(x.shape(), axis);
        let new_len = len + before + after;
        let mut out = vec![0.0; outer * new_len * inner];
        let xd = x.data();
        for o in 0..outer {
            let src = &xd[o * len * inner..(o + 1) * len * inner];
            let dst = o * new_len * inner + before * inner;
            out[dst..dst + len * inner].copy_from_slice(src);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = new_len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.record(t, Op::Pad { x: x.clone(), axis, before }))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&self, x: &Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        if end < start {
            return Err(dim_err("slice", x.shape(), &[start, end]));
        }
        self.slice_step(x, axis, start, 1, end - start)
    }

    /// Takes every `stride`-th entry along `axis`, starting at 0.
    pub fn subsample(&self, x: &Var, axis: usize, stride: usize) -> Result<Var> {
        if axis >= x.shape().len() || stride == 0 {
            return Err(dim_err("subsample", x.shape(), &[axis, stride]));
        }
        let len = x.shape()[axis].div_ceil(stride);
        self.slice_step(x, axis, 0, stride, len)
    }

    fn slice_step(&self, x: &Var, axis: usize, start: usize, step: usize, count: usize) -> Result<Var> {
        if axis >= x.shape().len() || (count > 0 && start + (count - 1) * step >= x.shape()[axis]) {
            return Err(dim_err("slice", x.shape(), &[axis, start, step, count]));
        }
        let (outer, len, inner) = axis_extents(x.shape(), axis);
        let xd = x.data();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for c in 0..count {
                let s = (o * len + start + c * step) * inner;
                out.extend_from_slice(&xd[s..s + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = count;
        let t = Tensor::new(&shape, out)?;
        Ok(self.record(
            t,
            Op::Slice {
                x: x.clone(),
                axis,
                start,
                step,
            },
        ))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&self, x: &Var) -> Var {
        let t = Tensor::scalar(x.data().iter().sum());
        self.record(t, Op::Sum(x.clone()))
    }

    pub fn mean(&self, x: &Var) -> Var {
        let n = x.data().len().max(1) as f64;
        let t = Tensor::scalar(x.data().iter().sum::<f64>() / n);
        self.record(t, Op::Mean(x.clone()))
    }

    /// A scalar whose value and gradient were computed outside the graph.
    pub fn external_loss(&self, x: &Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != x.data().len() {
            return Err(dim_err("external_loss", x.shape(), &[grad.len()]));
        }
        Ok(self.record(Tensor::scalar(value), Op::External(x.clone(), grad)))
    }

    // ---------------------------------------------------------------- convolution

    /// Same-padded 1-D convolution over the time axis of `x: [n×c_in]`.
    ///
    /// Output length is `ceil(n / stride)`; no bias (use [`Graph::add_bias`]).
    pub fn conv1d(&self, x: &Var, w: &Var, stride: usize, mode: ConvMode) -> Result<Var> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || stride == 0 {
            return Err(dim_err("conv1d", xs, ws));
        }
        let (n, ci) = (xs[0], xs[1]);
        let depthwise = mode == ConvMode::Depthwise;
        let (k, co) = match mode {
            ConvMode::Depthwise => {
                if ws.len() != 2 || ws[1] != ci {
                    return Err(dim_err("conv1d", xs, ws));
                }
                (ws[0], ci)
            }
            ConvMode::Pointwise | ConvMode::Dense => {
                if ws.len() != 3 || ws[1] != ci {
                    return Err(dim_err("conv1d", xs, ws));
                }
                if mode == ConvMode::Pointwise && ws[0] != 1 {
                    return Err(config_err(format!("pointwise kernel must have size 1, got {}", ws[0])));
                }
                (ws[0], ws[2])
            }
        };
        if k % 2 == 0 {
            return Err(config_err(format!("convolution kernel size must be odd, got {k}")));
        }
        let pad = same_pad(k);
        let n_out = conv_out_len(n, stride);
        let mut out = vec![0.0; n_out * co];
        let (xd, wd) = (x.data(), w.data());
        for o in 0..n_out {
            for tap in 0..k {
                let Some(src) = (o * stride + tap).checked_sub(pad).filter(|&s| s < n) else {
                    continue;
                };
                    let xrow = &xd[src * ci..(src + 1) * ci];
                let orow = &mut out[o * co..(o + 1) * co];
                if depthwise {
                    let wrow = &wd[tap * ci..(tap + 1) * ci];
                    for ((ov, xv), wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *ov += xv * wv;
                    }
                } else {
                    let wmat = &wd[tap * ci * co..(tap + 1) * ci * co];
                    gemm_acc(orow, xrow, wmat, 1, ci, co, false, false);
                }
            }
        }
        // Counted as output_elems · kernel_taps · in_channels (÷ channels for depthwise).
        self.count(if depthwise { n_out * k * ci } else { n_out * k * ci * co });
        let t = Tensor::new(&[n_out, co], out)?;
        Ok(self.record(
            t,
            Op::Conv1d {
                x: x.clone(),
                w: w.clone(),
                stride,
                depthwise,
            },
        ))
    }

    /// Same-padded 2-D convolution of `x: [t×f×c_in]` with `w: [kt×kf×c_in×c_out]`,
    /// equal stride on both axes.
    pub fn conv2d(&self, x: &Var, w: &Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] || stride == 0 {
            return Err(dim_err("conv2d", xs, ws));
        }
        let (t, f, ci) = (xs[0], xs[1], xs[2]);
        let (kt, kf, co) = (ws[0], ws[1], ws[3]);
        if kt % 2 == 0 || kf % 2 == 0 {
            return Err(config_err("conv2d kernel sizes must be odd"));
        }
        let (pt, pf) = (same_pad(kt), same_pad(kf));
        let (to, fo) = (conv_out_len(t, stride), conv_out_len(f, stride));
        let mut out = vec![0.0; to * fo * co];
        let (xd, wd) = (x.data(), w.data());
        for ot in 0..to {
            for a in 0..kt {
                let Some(st) = (ot * stride + a).checked_sub(pt).filter(|&s| s < t) else {
                    continue;
                };
                for of in 0..fo {
                    let orow = &mut out[(ot * fo + of) * co..(ot * fo + of + 1) * co];
                    for b in 0..kf {
                        let Some(sf) = (of * stride + b).checked_sub(pf).filter(|&s| s < f) else {
                            continue;
                        };
                        let xrow = &xd[(st * f + sf) * ci..(st * f + sf + 1) * ci];
                        let wmat = &wd[(a * kf + b) * ci * co..(a * kf + b + 1) * ci * co];
                        gemm_acc(orow, xrow, wmat, 1, ci, co, false, false);
                    }
                }
            }
        }
        self.count(to * fo * co * kt * kf * ci);
        let t = Tensor::new(&[to, fo, co], out)?;
        Ok(self.record(
            t,
            Op::Conv2d {
                x: x.clone(),
                w: w.clone(),
                stride,
            },
        ))
    }

    /// Average pooling over time with window = stride; a short tail window
    /// averages only its valid rows. Output length `ceil(n / window)`.
    pub fn avg_pool1d(&self, x: &Var, window: usize) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != 2 || window == 0 {
            return Err(dim_err("avg_pool1d", xs, &[window]));
        }
        let (n, c) = (xs[0], xs[1]);
        let n_out = n.div_ceil(window);
        let mut out = vec![0.0; n_out * c];
        for o in 0..n_out {
            let lo = o * window;
            let hi = (lo + window).min(n);
            let inv = 1.0 / (hi - lo) as f64;
            for s in lo..hi {
                for j in 0..c {
                    out[o * c + j] += x.data()[s * c + j] * inv;
                }
            }
        }
        let t = Tensor::new(&[n_out, c], out)?;
        Ok(self.record(t, Op::AvgPool(x.clone(), window)))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates `∂loss/∂·` to every tracked value reachable from `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !loss.shape().is_empty() {
            return Err(Error::Contract(format!(
                "backward needs a rank-0 loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let Some(root) = loss.id else {
            return Err(Error::Contract("loss is not connected to any tracked input".into()));
        };
        grads[root] = Some(vec![1.0]);
        for idx in (0..=root).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            backprop(&node.op, &node.value, &dy, &mut grads);
        }
        let leaf_grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| if matches!(n.op, Op::Leaf) { g } else { None })
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(k, v)| (*k, v.id.unwrap()))
            .collect();
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
            params,
        })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<usize, usize>,
}

impl Gradients {
    fn by_id(&self, id: usize) -> Option<Tensor> {
        let shape = &self.shapes[id];
        Some(match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()).ok()?,
            None => Tensor::zeros(shape),
        })
    }

    /// Gradient for a leaf; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: &Var) -> Option<Tensor> {
        v.id.and_then(|id| self.by_id(id))
    }

    /// Gradient for a weight bound with [`Graph::param`].
    pub fn wrt_param(&self, p: &Param) -> Option<Tensor> {
        self.params.get(&p.key()).and_then(|&id| self.by_id(id))
    }
}

fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: &Var, f: impl FnOnce(&mut [f64])) {
    if let Some(id) = v.id {
        let g = grads[id].get_or_insert_with(|| vec![0.0; v.value.numel()]);
        f(g);
    }
}

fn backprop(op: &Op, out: &Tensor, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            accumulate(grads, a, |g| gemm_acc(g, dy, b.data(), m, p, k, false, true));
            accumulate(grads, b, |g| gemm_acc(g, a.data(), dy, k, m, p, true, false));
        }
        Op::Bmm(a, b) => {
            let (bt, m, k, p) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
            accumulate(grads, a, |g| {
                for i in 0..bt {
                    gemm_acc(
                        &mut g[i * m * k..(i + 1) * m * k],
                        &dy[i * m * p..(i + 1) * m * p],
                        &b.data()[i * k * p..(i + 1) * k * p],
                        m,
                        p,
                        k,
                        false,
                        true,
                    );
                }
            });
            accumulate(grads, b, |g| {
                for i in 0..bt {
                    gemm_acc(
                        &mut g[i * k * p..(i + 1) * k * p],
                        &a.data()[i * m * k..(i + 1) * m * k],
                        &dy[i * m * p..(i + 1) * m * p],
                        k,
                        m,
                        p,
                        true,
                        false,
                    );
                }
            });
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                accumulate(grads, v, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
        }
        Op::Mul(a, b) => {
            accumulate(grads, a, |g| {
                for ((g, d), bv) in g.iter_mut().zip(dy).zip(b.data()) {
                    *g += d * bv;
                }
            });
            accumulate(grads, b, |g| {
                for ((g, d), av) in g.iter_mut().zip(dy).zip(a.data()) {
                    *g += d * av;
                }
            });
        }
        Op::Scale(x, c) => accumulate(grads, x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d)),
        Op::AddBias(x, b) => {
            accumulate(grads, x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            let c = b.value.numel();
            accumulate(grads, b, |g| {
                for (i, d) in dy.iter().enumerate() {
                    g[i % c] += d;
                }
            });
        }
        Op::Sigmoid(x) => accumulate(grads, x, |g| {
            for ((g, d), y) in g.iter_mut().zip(dy).zip(out.data()) {
                *g += d * y * (1.0 - y);
            }
        }),
        Op::Swish(x) => accumulate(grads, x, |g| {
            for ((g, d), v) in g.iter_mut().zip(dy).zip(x.data()) {
                let s = sigmoid(*v);
                *g += d * (s + v * s * (1.0 - s));
            }
        }),
        Op::Glu(x) => accumulate(grads, x, |g| {
            let last = *x.shape().last().unwrap();
            let c = last / 2;
            let xd = x.data();
            for r in 0..dy.len() / c {
                for j in 0..c {
                    let a = xd[r * last + j];
                    let s = sigmoid(xd[r * last + c + j]);
                    let d = dy[r * c + j];
                    g[r * last + j] += d * s;
                    g[r * last + c + j] += d * a * s * (1.0 - s);
                }
            }
        }),
        Op::Softmax(x, axis) => accumulate(grads, x, |g| {
            let (o, l, inner) = axis_extents(x.shape(), *axis);
            let y = out.data();
            for oi in 0..o {
                for ii in 0..inner {
                    let base = oi * l * inner + ii;
                    let mut s = 0.0;
                    for t in 0..l {
                        s += y[base + t * inner] * dy[base + t * inner];
                    }
                    for t in 0..l {
                        let at = base + t * inner;
                        g[at] += y[at] * (dy[at] - s);
                    }
                }
            }
        }),
        Op::LogSoftmax(x, axis) => accumulate(grads, x, |g| {
            let (o, l, inner) = axis_extents(x.shape(), *axis);
            let y = out.data();
            for oi in 0..o {
                for ii in 0..inner {
                    let base = oi * l * inner + ii;
                    let mut s = 0.0;
                    for t in 0..l {
                        s += dy[base + t * inner];
                    }
                    for t in 0..l {
                        let at = base + t * inner;
                        g[at] += dy[at] - libm::exp(y[at]) * s;
                    }
                }
            }
        }),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = gamma.value.numel();
            let rows = rstd.len();
            let gd = gamma.data();
            accumulate(grads, x, |g| {
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let span = r * d..(r + 1) * d;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dxhat[j] = dy[r * d + j] * gd[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[r * d + j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for (j, gi) in g[span].iter_mut().enumerate() {
                        *gi += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                    }
                }
            });
            accumulate(grads, gamma, |g| {
                for (i, d_) in dy.iter().enumerate() {
                    g[i % d] += d_ * xhat[i];
                }
            });
            accumulate(grads, beta, |g| {
                for (i, d_) in dy.iter().enumerate() {
                    g[i % d] += d_;
                }
            });
        }
        Op::Reshape(x) => accumulate(grads, x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)),
        Op::Permute(x, axes) => accumulate(grads, x, |g| {
            for (i, src) in permute_map(x.shape(), axes).into_iter().enumerate() {
                g[src] += dy[i];
            }
        }),
        Op::Pad { x, axis, before } => accumulate(grads, x, |g| {
            let (outer, len, inner) = axis_extents(x.shape(), *axis);
            let new_len = out.shape()[*axis];
            for o in 0..outer {
                let src = o * new_len * inner + before * inner;
                for (gv, d) in g[o * len * inner..(o + 1) * len * inner]
                    .iter_mut()
                    .zip(&dy[src..src + len * inner])
                {
                    *gv += d;
                }
            }
        }),
        Op::Slice { x, axis, start, step } => accumulate(grads, x, |g| {
            let (outer, len, inner) = axis_extents(x.shape(), *axis);
            let count = out.shape()[*axis];
            for o in 0..outer {
                for c in 0..count {
                    let s = (o * len + start + c * step) * inner;
                    let d = (o * count + c) * inner;
                    for (gv, dv) in g[s..s + inner].iter_mut().zip(&dy[d..d + inner]) {
                        *gv += dv;
                    }
                }
            }
        }),
        Op::Sum(x) => accumulate(grads, x, |g| g.iter_mut().for_each(|g| *g += dy[0])),
        Op::Mean(x) => {
            let n = x.value.numel().max(1) as f64;
            accumulate(grads, x, |g| g.iter_mut().for_each(|g| *g += dy[0] / n))
        }
        Op::External(x, local) => accumulate(grads, x, |g| {
            for (gv, l) in g.iter_mut().zip(local) {
                *gv += dy[0] * l;
            }
        }),
        Op::Conv1d {
            x,
            w,
            stride,
            depthwise,
        } => {
            let (n, ci) = (x.shape()[0], x.shape()[1]);
            let k = w.shape()[0];
            let co = out.shape()[1];
            let n_out = out.shape()[0];
            let pad = same_pad(k);
            let (xd, wd) = (x.data(), w.data());
            let each = |f: &mut dyn FnMut(usize, usize, usize)| {
                for o in 0..n_out {
                    for tap in 0..k {
                        if let Some(src) = (o * stride + tap).checked_sub(pad).filter(|&s| s < n) {
                            f(o, tap, src);
                        }
                    }
                }
            };
            accumulate(grads, x, |g| {
                each(&mut |o, tap, src| {
                    let drow = &dy[o * co..(o + 1) * co];
                    let grow = &mut g[src * ci..(src + 1) * ci];
                    if *depthwise {
                        let wrow = &wd[tap * ci..(tap + 1) * ci];
                        for ((gv, dv), wv) in grow.iter_mut().zip(drow).zip(wrow) {
                            *gv += dv * wv;
                        }
                    } else {
                        let wmat = &wd[tap * ci * co..(tap + 1) * ci * co];
                        gemm_acc(grow, drow, wmat, 1, co, ci, false, true);
                    }
                })
            });
            accumulate(grads, w, |g| {
                each(&mut |o, tap, src| {
                    let drow = &dy[o * co..(o + 1) * co];
                    let xrow = &xd[src * ci..(src + 1) * ci];
                    if *depthwise {
                        for ((gv, dv), xv) in g[tap * ci..(tap + 1) * ci].iter_mut().zip(drow).zip(xrow) {
                            *gv += dv * xv;
                        }
                    } else {
                        gemm_acc(&mut g[tap * ci * co..(tap + 1) * ci * co], xrow, drow, ci, 1, co, true, false);
                    }
                })
            });
        }
        Op::Conv2d { x, w, stride } => {
            let (t, f, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kt, kf, co) = (w.shape()[0], w.shape()[1], w.shape()[3]);
            let (to, fo) = (out.shape()[0], out.shape()[1]);
            let (pt, pf) = (same_pad(kt), same_pad(kf));
            let (xd, wd) = (x.data(), w.data());
            let each = |f_: &mut dyn FnMut(usize, usize, usize)| {
                for ot in 0..to {
                    for a in 0..kt {
                        let Some(st) = (ot * stride + a).checked_sub(pt).filter(|&s| s < t) else {
                            continue;
                        };
                        for of in 0..fo {
                            for b in 0..kf {
                                let Some(sf) = (of * stride + b).checked_sub(pf).filter(|&s| s < f) else {
                                    continue;
                                };
                                f_(ot * fo + of, a * kf + b, st * f + sf);
                            }
                        }
                    }
                }
            };
            accumulate(grads, x, |g| {
                each(&mut |o, tap, src| {
                    gemm_acc(
                        &mut g[src * ci..(src + 1) * ci],
                        &dy[o * co..(o + 1) * co],
                        &wd[tap * ci * co..(tap + 1) * ci * co],
                        1,
                        co,
                        ci,
                        false,
                        true,
                    )
                })
            });
            accumulate(grads, w, |g| {
                each(&mut |o, tap, src| {
                    gemm_acc(
                        &mut g[tap * ci * co..(tap + 1) * ci * co],
                        &xd[src * ci..(src + 1) * ci],
                        &dy[o * co..(o + 1) * co],
                        ci,
                        1,
                        co,
                        true,
                        false,
                    )
                })
            });
        }
        Op::AvgPool(x, window) => accumulate(grads, x, |g| {
            let (n, c) = (x.shape()[0], x.shape()[1]);
            for o in 0..out.shape()[0] {
                let lo = o * window;
                let hi = (lo + window).min(n);
                let inv = 1.0 / (hi - lo) as f64;
                for s in lo..hi {
                    for j in 0..c {
                        g[s * c + j] += dy[o * c + j] * inv;
                    }
                }
            }
        }),
    }
}
