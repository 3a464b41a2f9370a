//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the [`Graph`]; node indices are a topological
//! order, so [`Graph::backward`] is a single reverse sweep over the tape.

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{self, Window};
use crate::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointwiseKind {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the batch statistics and update the running estimates.
    BatchStats,
    /// Normalize with the stored running estimates.
    RunningStats,
}

/// Per-channel running mean/variance of a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Backward rule of a user-supplied op: `(grad_out, input values) -> input grads`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>>>;

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Window,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: Window,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Bce {
        logits: Var,
        target: Tensor<T>,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Record of executed ops with their values; gradients land on leaves.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Broadcast layout of a binary op: operands equal, or one has a single channel.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `b` is `[B,1,H,W]` against `a` `[B,C,H,W]`.
    RightChannel { c: usize, plane: usize },
    LeftChannel { c: usize, plane: usize },
}

fn broadcast_layout(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if let ([ab, ac, ah, aw], [bb, bc, bh, bw]) = (a, b) {
        if ab == bb && ah == bh && aw == bw {
            if *bc == 1 {
                return Ok(Broadcast::RightChannel { c: *ac, plane: ah * aw });
            }
            if *ac == 1 {
                return Ok(Broadcast::LeftChannel { c: *bc, plane: ah * aw });
            }
        }
    }
    Err(mismatch("binary_broadcast", a, b))
}

/// Sums a `[B,C,H,W]` buffer over channels into `[B,1,H,W]`.
fn reduce_channels<T: Real>(g: &[T], c: usize, plane: usize) -> Vec<T> {
    let batch = g.len() / (c * plane);
    let mut out = vec![T::zero(); batch * plane];
    for b in 0..batch {
        let dst = &mut out[b * plane..(b + 1) * plane];
        for ci in 0..c {
            let src = &g[(b * c + ci) * plane..(b * c + ci + 1) * plane];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert!(value.all_finite() || parents.iter().any(|p| !self.value(*p).all_finite()));
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros when no backward pass reached it.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [batch, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if cin != wcin {
            return Err(mismatch("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = Window::new(cin, h, wd, kh, kw, stride, pad).ok_or_else(|| {
            invalid(
                "conv2d",
                format!(
                    "kernel {}x{} stride {} does not fit input {}x{} with pad {}",
                    kh, kw, stride, h, wd, pad
                ),
            )
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            &geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![batch, cout, geom.oh, geom.ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Transposed convolution with weight layout `[cin, cout, kh, kw]`, no padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(invalid("conv_transpose2d", "stride must be positive"));
        }
        let [batch, cin, h, wd] = self.value(x).dims4()?;
        let [wcin, cout, kh, kw] = self.value(w).dims4()?;
        if cin != wcin {
            return Err(mismatch("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv_transpose2d bias", self.shape(b), &[cout]));
            }
        }
        if h == 0 || wd == 0 {
            return Err(invalid("conv_transpose2d", "empty spatial extent"));
        }
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        let geom = Window::new(cout, oh, ow, kh, kw, stride, 0)
            .ok_or_else(|| invalid("conv_transpose2d", "invalid kernel"))?;
        debug_assert_eq!((geom.oh, geom.ow), (h, wd));
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            batch,
            cin,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &parents))
    }

    pub fn pool2d(&mut self, kind: PoolKind, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [batch, c, h, w] = self.value(x).dims4()?;
        if k == 0 || stride == 0 {
            return Err(invalid("pool2d", "window and stride must be at least 1"));
        }
        let geom = Window::new(c, h, w, k, k, stride, 0).ok_or_else(|| {
            invalid("pool2d", format!("window {}x{} larger than input {}x{}", k, k, h, w))
        })?;
        let planes = batch * c;
        let shape = vec![batch, c, geom.oh, geom.ow];
        let v = self.value(x).data();
        Ok(match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::max_pool(v, planes, &geom);
                self.push(Tensor::new(shape, out)?, Op::MaxPool { x, argmax }, &[x])
            }
            PoolKind::Avg => {
                let out = kernels::avg_pool(v, planes, &geom);
                self.push(Tensor::new(shape, out)?, Op::AvgPool { x, geom }, &[x])
            }
        })
    }

    pub fn pointwise(&mut self, kind: PointwiseKind, x: Var) -> Var {
        match kind {
            PointwiseKind::Relu => {
                let v = self.value(x).map(|v| v.max(T::zero()));
                self.push(v, Op::Relu(x), &[x])
            }
            PointwiseKind::Sigmoid => {
                let v = self.value(x).map(sigmoid);
                self.push(v, Op::Sigmoid(x), &[x])
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(PointwiseKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.pointwise(PointwiseKind::Sigmoid, x)
    }

    /// Elementwise add/mul; one operand may have a single channel that is
    /// broadcast across the other's channels.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let layout = broadcast_layout(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Mul => x * y,
        };
        let (shape, data): (Vec<usize>, Vec<T>) = match layout {
            Broadcast::Same => (
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::RightChannel { c, plane } => (
                av.shape().to_vec(),
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv.data()[(i / (c * plane)) * plane + i % plane]))
                    .collect(),
            ),
            Broadcast::LeftChannel { c, plane } => (
                bv.shape().to_vec(),
                bv.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(av.data()[(i / (c * plane)) * plane + i % plane], y))
                    .collect(),
            ),
        };
        let value = Tensor::new(shape, data)?;
        let op = match kind {
            BinaryKind::Add => Op::Add(a, b),
            BinaryKind::Mul => Op::Mul(a, b),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::lit(scale), T::lit(shift));
        let v = self.value(x).map(|v| s * v + t);
        self.push(v, Op::Affine { x, scale: s }, &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ab, ac, ah, aw] = self.value(a).dims4()?;
        let [bb, bc, bh, bw] = self.value(b).dims4()?;
        if ab != bb || ah != bh || aw != bw {
            return Err(mismatch("concat_channels", self.shape(a), self.shape(b)));
        }
        let plane = ah * aw;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ab * (ac + bc) * plane);
        for i in 0..ab {
            data.extend_from_slice(&av[i * ac * plane..(i + 1) * ac * plane]);
            data.extend_from_slice(&bv[i * bc * plane..(i + 1) * bc * plane]);
        }
        let value = Tensor::new(vec![ab, ac + bc, ah, aw], data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_channels(start, len)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    /// Per-channel normalization over `(B, H, W)` with affine `gamma`/`beta`.
    pub fn norm_layer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: &mut RunningStats<T>,
    ) -> Result<Var> {
        let [batch, c, h, w] = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("norm_layer", self.shape(x), self.shape(gamma)));
        }
        if running.mean.len() != c {
            return Err(invalid("norm_layer", "running statistics channel count"));
        }
        let plane = h * w;
        let n = batch * plane;
        let xv = self.value(x).data();
        let eps = T::lit(NORM_EPS);
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        match mode {
            NormMode::BatchStats => {
                if n == 0 {
                    return Err(invalid("norm_layer", "empty batch"));
                }
                let momentum = T::lit(NORM_MOMENTUM);
                for ci in 0..c {
                    let mut sum = 0.0f64;
                    for b in 0..batch {
                        let off = (b * c + ci) * plane;
                        sum += xv[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mean = sum / n as f64;
                    let mut sq = 0.0f64;
                    for b in 0..batch {
                        let off = (b * c + ci) * plane;
                        sq += xv[off..off + plane]
                            .iter()
                            .map(|v| (v.as_f64() - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / n as f64;
                    means[ci] = T::lit(mean);
                    inv_std[ci] = T::one() / (T::lit(var) + eps).sqrt();
                    let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                    running.mean[ci] = (T::one() - momentum) * running.mean[ci] + momentum * T::lit(mean);
                    running.var[ci] = (T::one() - momentum) * running.var[ci] + momentum * T::lit(unbiased);
                }
            }
            NormMode::RunningStats => {
                for ci in 0..c {
                    means[ci] = running.mean[ci];
                    inv_std[ci] = T::one() / (running.var[ci] + eps).sqrt();
                }
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for ci in 0..c {
                let off = (b * c + ci) * plane;
                for i in off..off + plane {
                    xhat[i] = (xv[i] - means[ci]) * inv_std[ci];
                    out[i] = gv[ci] * xhat[i] + bv[ci];
                }
            }
        }
        let value = Tensor::new(vec![batch, c, h, w], out)?;
        let op = Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: mode == NormMode::BatchStats,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    /// Mean binary cross-entropy on logits (negative log-likelihood form).
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(mismatch("bce_with_logits", self.shape(logits), target.shape()));
        }
        if target.data().iter().any(|&y| !(y >= T::zero() && y <= T::one())) {
            return Err(invalid("bce_with_logits", "targets must lie in [0, 1]"));
        }
        let z = self.value(logits).data();
        let mut acc = 0.0f64;
        for (&zi, &yi) in z.iter().zip(target.data()) {
            let (zf, yf) = (zi.as_f64(), yi.as_f64());
            acc += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
        }
        let n = z.len().max(1) as f64;
        let value = Tensor::scalar(T::lit(acc / n));
        Ok(self.push(
            value,
            Op::Bce {
                logits,
                target: target.clone(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::lit(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().map(|v| v.as_f64()).sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(T::lit(s)), Op::Mean(x), &[x])
    }

    /// Registers an op computed outside the graph with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Propagates d(loss)/d(node) to every differentiable leaf, adding into
    /// any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let batch = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    batch,
                    geom,
                    self.value(*w).data(),
                    cout,
                    gd,
                    needs(*x),
                );
                if needs(*x) {
                    out.push((*x, like(*x, dx)?));
                }
                out.push((*w, like(*w, dw)?));
                if let Some(b) = b {
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let [batch, cin, _, _] = self.value(*x).dims4()?;
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    batch,
                    cin,
                    geom,
                    self.value(*w).data(),
                    gd,
                    needs(*x),
                );
                if needs(*x) {
                    out.push((*x, like(*x, dx)?));
                }
                out.push((*w, like(*w, dw)?));
                if let Some(b) = b {
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::AvgPool { x, geom } => {
                let [batch, c, _, _] = self.value(*x).dims4()?;
                out.push((*x, like(*x, kernels::avg_pool_backward(gd, batch * c, geom))?));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, like(*x, dx)?));
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                let dx = yv.iter().zip(gd).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                out.push((*x, like(*x, dx)?));
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let layout = broadcast_layout(self.shape(*a), self.shape(*b))?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // expand index of the broadcast operand
                let (ia, ib): (Box<dyn Fn(usize) -> usize>, Box<dyn Fn(usize) -> usize>) = match layout {
                    Broadcast::Same => (Box::new(|i| i), Box::new(|i| i)),
                    Broadcast::RightChannel { c, plane } => {
                        (Box::new(|i| i), Box::new(move |i| (i / (c * plane)) * plane + i % plane))
                    }
                    Broadcast::LeftChannel { c, plane } => {
                        (Box::new(move |i| (i / (c * plane)) * plane + i % plane), Box::new(|i| i))
                    }
                };
                let full_a: Vec<T> = if is_mul {
                    gd.iter().enumerate().map(|(i, &gv)| gv * bv[ib(i)]).collect()
                } else {
                    gd.to_vec()
                };
                let full_b: Vec<T> = if is_mul {
                    gd.iter().enumerate().map(|(i, &gv)| gv * av[ia(i)]).collect()
                } else {
                    gd.to_vec()
                };
                let (da, db) = match layout {
                    Broadcast::Same => (full_a, full_b),
                    Broadcast::RightChannel { c, plane } => (full_a, reduce_channels(&full_b, c, plane)),
                    Broadcast::LeftChannel { c, plane } => (reduce_channels(&full_a, c, plane), full_b),
                };
                out.push((*a, like(*a, da)?));
                out.push((*b, like(*b, db)?));
            }
            Op::Affine { x, scale } => {
                out.push((*x, like(*x, gd.iter().map(|&v| v * *scale).collect())?));
            }
            Op::Concat(a, b) => {
                let ac = self.shape(*a)[1];
                let bc = self.shape(*b)[1];
                let ga = g.slice_channels(0, ac)?;
                let gb = g.slice_channels(ac, bc)?;
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::SliceChannels { x, start } => {
                let [batch, c, h, w] = self.value(*x).dims4()?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); batch * c * plane];
                for b in 0..batch {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&gd[src..src + len * plane]);
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [batch, c, h, w] = self.value(*x).dims4()?;
                let plane = h * w;
                let n = T::lit((batch * plane) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                for ci in 0..c {
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for b in 0..batch {
                        let off = (b * c + ci) * plane;
                        for j in off..off + plane {
                            sg += gd[j];
                            sgx += gd[j] * xhat[j];
                        }
                    }
                    dgamma[ci] = sgx;
                    dbeta[ci] = sg;
                    let scale = gv[ci] * inv_std[ci];
                    for b in 0..batch {
                        let off = (b * c + ci) * plane;
                        for j in off..off + plane {
                            dx[j] = if *batch_stats {
                                scale * (gd[j] - sg / n - xhat[j] * sgx / n)
                            } else {
                                scale * gd[j]
                            };
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
                out.push((*gamma, like(*gamma, dgamma)?));
                out.push((*beta, like(*beta, dbeta)?));
            }
            Op::Bce { logits, target } => {
                let z = self.value(*logits).data();
                let n = T::lit(z.len().max(1) as f64);
                let scale = gd[0] / n;
                let dz = z
                    .iter()
                    .zip(target.data())
                    .map(|(&zi, &yi)| (sigmoid(zi) - yi) * scale)
                    .collect();
                out.push((*logits, like(*logits, dz)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.shape(*x).to_vec(), gd[0])));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len().max(1) as f64);
                out.push((*x, Tensor::full(self.shape(*x).to_vec(), gd[0] / n)));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = backward(g, &vals);
                if gs.len() != inputs.len() {
                    return Err(invalid("custom", "backward arity differs from inputs"));
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if gi.shape() != self.shape(*v) {
                        return Err(mismatch("custom backward", gi.shape(), self.shape(*v)));
                    }
                    out.push((*v, gi));
                }
            }
        }
        Ok(out)
    }
}
