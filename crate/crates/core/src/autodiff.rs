//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node whose value is computed eagerly. Nodes are
//! stored in execution order, so walking the tape backwards visits them in
//! reverse topological order. Inputs that do not require gradients produce
//! constant nodes that backward skips.
//!
//! Gradients of leaves accumulate across repeated [`Tape::backward`] calls
//! until [`Tape::zero_grad`] is called.

use std::rc::Rc;

use crate::bilinear::Taps;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{log_softmax_row, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side (odd kernels).
    Same,
    Valid,
}

/// Batch-norm normalization source.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, T> {
    /// Normalize with the batch's own statistics.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Statistics observed by a training-mode batch norm. `var` is unbiased.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeom },
    GlobalAvgPool(Var),
    Relu(Var),
    Exp(Var),
    LogSoftmax(Var),
    Sum(Var),
    Reshape(Var),
    Pad { x: Var, pad: [usize; 4] },
    Resample { x: Var, taps: Rc<Taps> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Pad { .. } => "pad",
            Op::Resample { .. } => "bilinear_sample",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient, kept for leaves only.
    grad: Option<Vec<T>>,
}

/// Single-owner record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<T: Scalar>(acc: &mut Option<Vec<T>>, delta: &[T]) {
    match acc {
        Some(a) => {
            for (x, &d) in a.iter_mut().zip(delta) {
                *x = *x + d;
            }
        }
        None => *acc = Some(delta.to_vec()),
    }
}

fn add_owned<T: Scalar>(acc: &mut Option<Vec<T>>, delta: Vec<T>) {
    match acc {
        Some(a) => {
            for (x, d) in a.iter_mut().zip(delta) {
                *x = *x + d;
            }
        }
        None => *acc = Some(delta),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: participates in backward and receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad mirrors value shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Constant };
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Adds `bias[c]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(shape_err("add_bias", xs, bs));
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val = *val + b[(i / inner) % channels];
        }
        Ok(self.push(v, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x: [N, C, H, W]`, `w: [O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err("conv2d", xs, ws));
        }
        let pad = match padding {
            Padding::Same => (ws[2] - 1) / 2,
            Padding::Valid => 0,
        };
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(shape_err("conv2d", xs, ws));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let v = Tensor::new(vec![geom.batch, geom.out_c, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    fn pool_geom(&self, op: &'static str, x: Var, kernel: usize, stride: usize) -> Result<PoolGeom> {
        let xs = self.shape(x);
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(shape_err(op, xs, &[kernel, kernel]));
        }
        Ok(PoolGeom {
            planes: xs[0] * xs[1],
            in_h: xs[2],
            in_w: xs[3],
            kernel,
            stride,
        })
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom("max_pool2d", x, kernel, stride)?;
        let (out, argmax) = kernels::max_pool_forward(&geom, self.value(x).data());
        let xs = self.shape(x);
        let v = Tensor::new(vec![xs[0], xs[1], geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom("avg_pool2d", x, kernel, stride)?;
        let out = kernels::avg_pool_forward(&geom, self.value(x).data());
        let xs = self.shape(x);
        let v = Tensor::new(vec![xs[0], xs[1], geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(v, Op::AvgPool { x, geom }, &[x]))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", &xs, &[]));
        }
        let inner = xs[2] * xs[3];
        let norm = T::of(1.0 / inner as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|p| p.iter().copied().sum::<T>() * norm)
            .collect();
        let v = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    /// Log-softmax over the last axis of a `[N, C]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("log_softmax", &xs, &[]));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(xs[1]).zip(out.chunks_mut(xs[1])) {
            log_softmax_row(row, dst);
        }
        let v = Tensor::new(xs, out)?;
        Ok(self.push(v, Op::LogSoftmax(x), &[x]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::of(1.0 / n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Zero-pads the spatial axes of `[N, C, H, W]` by `[top, bottom, left, right]`.
    pub fn pad(&mut self, x: Var, pad: [usize; 4]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("pad", &xs, &pad));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); xs[0] * xs[1] * oh * ow];
        for p in 0..xs[0] * xs[1] {
            for y in 0..h {
                let s = (p * h + y) * w;
                let d = (p * oh + y + pad[0]) * ow + pad[2];
                out[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
        let v = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(v, Op::Pad { x, pad }, &[x]))
    }

    /// Bilinear resampling of every `[H, W]` plane of `[N, C, H, W]`.
    /// Out-of-support samples are zero.
    pub fn bilinear_sample(&mut self, x: Var, taps: Rc<Taps>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] != taps.in_h || xs[3] != taps.in_w {
            return Err(shape_err("bilinear_sample", &xs, &[taps.in_h, taps.in_w]));
        }
        let src = self.value(x).data();
        let plane_in = taps.in_h * taps.in_w;
        let plane_out = taps.out_h * taps.out_w;
        let mut out = vec![T::zero(); xs[0] * xs[1] * plane_out];
        for (p, dst) in out.chunks_mut(plane_out).enumerate() {
            let s = &src[p * plane_in..(p + 1) * plane_in];
            for (d, tap) in dst.iter_mut().zip(&taps.taps) {
                if let Some(t) = tap {
                    *d = t.iter().map(|&(i, wt)| s[i] * T::of(wt)).sum();
                }
            }
        }
        let v = Tensor::new(vec![xs[0], xs[1], taps.out_h, taps.out_w], out)?;
        Ok(self.push(v, Op::Resample { x, taps }, &[x]))
    }

    /// Batch normalization over axis 1 of `[N, C]` or `[N, C, H, W]`.
    /// With [`NormStats::Batch`] the observed moments are returned so the
    /// caller can fold them into running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", &xs, self.shape(gamma)));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(shape_err("batch_norm", &xs, self.shape(p)));
            }
        }
        let eps = T::of(BN_EPS);
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let (mean, var) = kernels::channel_moments(self.value(x).data(), batch, channels, inner);
                let m = batch * inner;
                let unbias = if m > 1 { T::of(m as f64 / (m - 1) as f64) } else { T::one() };
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbias).collect(),
                };
                (mean, var, Some(moments))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(shape_err("batch_norm", &xs, &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for (i, (&v, (h, o))) in src.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let c = (i / inner) % channels;
            *h = (v - mean[c]) * inv_std[c];
            *o = g[c] * *h + b[c];
        }
        let v = Tensor::new(xs, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: moments.is_some(),
        };
        Ok((self.push(v, op, &[x, gamma, beta]), moments))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if !ls.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                ls.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                add_owned(&mut self.nodes[idx].grad, g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_owned(&mut grads[b.0], g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    add_owned(&mut grads[a.0], g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(*b) {
                    add_owned(&mut grads[b.0], g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => {
                add_owned(&mut grads[a.0], g.iter().map(|&x| x * *c).collect());
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.wants(*bias) {
                    let xs = self.shape(*x);
                    let channels = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut gb = vec![T::zero(); channels];
                    for (i, &v) in g.iter().enumerate() {
                        let c = (i / inner) % channels;
                        gb[c] = gb[c] + v;
                    }
                    add_owned(&mut grads[bias.0], gb);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, self.value(*b).data(), true, T::zero(), &mut ga);
                    add_owned(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), true, g, false, T::zero(), &mut gb);
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    add_owned(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    add_owned(&mut grads[w.0], dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &v) in argmax.iter().zip(g) {
                    dx[i] = dx[i] + v;
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::AvgPool { x, geom } => {
                add_owned(&mut grads[x.0], kernels::avg_pool_backward(geom, g));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let inner = xs[2] * xs[3];
                let norm = T::of(1.0 / inner as f64);
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &v in g {
                    dx.extend(std::iter::repeat_n(v * norm, inner));
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                add_owned(
                    &mut grads[x.0],
                    g.iter()
                        .zip(vx)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Exp(x) => {
                let y = node.value.data();
                add_owned(&mut grads[x.0], g.iter().zip(y).map(|(&d, &v)| d * v).collect());
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                add_owned(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Pad { x, pad } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for p in 0..xs[0] * xs[1] {
                    for y in 0..h {
                        let d = (p * h + y) * w;
                        let s = (p * oh + y + pad[0]) * ow + pad[2];
                        dx[d..d + w].copy_from_slice(&g[s..s + w]);
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::Resample { x, taps } => {
                let plane_in = taps.in_h * taps.in_w;
                let plane_out = taps.out_h * taps.out_w;
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (p, gp) in g.chunks(plane_out).enumerate() {
                    let dp = &mut dx[p * plane_in..(p + 1) * plane_in];
                    for (&gv, tap) in gp.iter().zip(&taps.taps) {
                        if let Some(t) = tap {
                            for &(i, wt) in t {
                                dp[i] = dp[i] + gv * T::of(wt);
                            }
                        }
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (batch, channels) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    let c = (i / inner) % channels;
                    dgamma[c] = dgamma[c] + gv * h;
                    dbeta[c] = dbeta[c] + gv;
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    if *batch_stats {
                        let count = T::of((batch * inner) as f64);
                        for (i, d) in dx.iter_mut().enumerate() {
                            let c = (i / inner) % channels;
                            // dgamma/dbeta already hold sum(g * xhat) and sum(g).
                            *d = gam[c] * inv_std[c] / count
                                * (count * g[i] - dbeta[c] - xhat[i] * dgamma[c]);
                        }
                    } else {
                        for (i, d) in dx.iter_mut().enumerate() {
                            let c = (i / inner) % channels;
                            *d = g[i] * gam[c] * inv_std[c];
                        }
                    }
                    add_owned(&mut grads[x.0], dx);
                }
                if self.wants(*gamma) {
                    add_owned(&mut grads[gamma.0], dgamma);
                }
                if self.wants(*beta) {
                    add_owned(&mut grads[beta.0], dbeta);
                }
            }
        }
        Ok(())
    }

    /// Name of the primitive that produced `v`, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

/// Gradient of a scalar function with respect to its input `x`.
///
/// The closure receives a fresh tape and the input as a gradient-tracking
/// leaf; any parameters it binds live and die on that tape.
pub fn input_gradient<T, F>(x: &Tensor<T>, loss: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let l = loss(&mut tape, xv)?;
    if !tape.value(l).is_scalar() {
        return Err(Error::invalid(format!(
            "input_gradient closure returned shape {:?}, expected a scalar",
            tape.shape(l)
        )));
    }
    tape.backward(l)?;
    Ok(tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}
