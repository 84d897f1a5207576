//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep.

use super::kernels::{self, ConvGeometry};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    /// Trainable leaf; receives a gradient.
    Parameter,
    /// Data or frozen weights; no gradient.
    Input,
    /// Excluded from differentiation (e.g. sparsity thresholds).
    Constant,
    Computed,
}

/// Running statistics of a batch-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<R: Real = f32> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
    pub momentum: f64,
    pub eps: f64,
}

impl<R: Real> BatchNormStats<R> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![R::zero(); channels],
            var: vec![R::one(); channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op<R: Real> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<R>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Threshold {
        input: NodeId,
        threshold: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AppendCoords {
        input: NodeId,
        channels: usize,
    },
    Reshape(NodeId),
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    SoftmaxXent {
        logits: NodeId,
        probs: Vec<R>,
        targets: Vec<usize>,
    },
    Sigmoid(NodeId),
    MeanAbs(NodeId),
    BernoulliKl {
        input: NodeId,
        slope: f64,
    },
    Sum(NodeId),
    Scale {
        input: NodeId,
        factor: f64,
    },
    WeightedSum {
        input: NodeId,
        weights: Vec<R>,
    },
}

impl<R: Real> Op<R> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Threshold { .. } => "threshold",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AppendCoords { .. } => "append_coords",
            Op::Reshape(_) => "reshape",
            Op::Dense { .. } => "dense",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Sigmoid(_) => "sigmoid",
            Op::MeanAbs(_) => "mean_abs",
            Op::BernoulliKl { .. } => "bernoulli_kl",
            Op::Sum(_) => "sum",
            Op::Scale { .. } => "scale",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Debug)]
struct Node<R: Real> {
    op: Op<R>,
    kind: NodeKind,
    value: Tensor<R>,
    grad: Option<Tensor<R>>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    record: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    /// A graph that keeps what `backward` needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only graph; intermediate buffers are dropped and
    /// `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn parameter(&mut self, value: Tensor<R>) -> NodeId {
        let requires_grad = self.record;
        self.leaf(value, NodeKind::Parameter, requires_grad)
    }

    pub fn input(&mut self, value: Tensor<R>) -> NodeId {
        self.leaf(value, NodeKind::Input, false)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> NodeId {
        self.leaf(value, NodeKind::Constant, false)
    }

    fn leaf(&mut self, value: Tensor<R>, kind: NodeKind, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            kind,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<R>, value: Tensor<R>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = self.record && inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            op,
            kind: NodeKind::Computed,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.nodes[id.0].kind
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    /// Operands of a node, differentiable or not, in argument order.
    pub fn operands(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Add(a, b) => vec![*a, *b],
            Op::Threshold { input, threshold } => vec![*input, *threshold],
            Op::Relu(x) | Op::Reshape(x) | Op::Sigmoid(x) | Op::MeanAbs(x) | Op::Sum(x) => vec![*x],
            Op::MaxPool { input, .. }
            | Op::AppendCoords { input, .. }
            | Op::BernoulliKl { input, .. }
            | Op::Scale { input, .. }
            | Op::WeightedSum { input, .. } => vec![*input],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }

    /// Accumulated gradient, if any flowed into this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<R>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of a node, zero-filled when nothing flowed into it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<R> {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape().to_vec()))
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// "Same" cross-correlation of `[B,H,W,Cin]` with `[kh,kw,Cin,Cout]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ks, bs) = (
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} must be [B,H,W,C] and kernel {ks:?} [kh,kw,Cin,Cout]"),
            ));
        }
        if ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {ks:?} must have odd spatial size")));
        }
        if ks[2] != xs[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[3], ks[2]),
            ));
        }
        if bs != [ks[3]] {
            return Err(Error::shape("conv2d", format!("bias {bs:?} must be [{}]", ks[3])));
        }
        let geometry = ConvGeometry {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            in_channels: xs[3],
            out_channels: ks[3],
            kernel_h: ks[0],
            kernel_w: ks[1],
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geometry,
        );
        let value = Tensor::new(vec![xs[0], xs[1], xs[2], ks[3]], out)?;
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            geometry,
        };
        Ok(self.push(op, value, &[input, kernel, bias]))
    }

    /// Affine batch normalisation over every axis but the last.
    ///
    /// In train mode the batch statistics are used and folded into `stats`
    /// by exponential moving average; in eval mode `stats` is read only.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut BatchNormStats<R>,
        mode: Mode,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let c = x.channels();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] || stats.mean.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("input has {c} channels; gamma/beta/stats disagree"),
            ));
        }
        let n = x.len() / c;
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm in train mode needs at least two elements per channel".into(),
                    ));
                }
                let (mean, var) = kernels::channel_moments(x.data(), c);
                let mu = stats.momentum;
                let unbias = n as f64 / (n as f64 - 1.0);
                for ch in 0..c {
                    stats.mean[ch] = R::of(mu * stats.mean[ch].as_f64() + (1.0 - mu) * mean[ch]);
                    stats.var[ch] = R::of(mu * stats.var[ch].as_f64() + (1.0 - mu) * var[ch] * unbias);
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => (
                stats.mean.iter().map(|m| m.as_f64()).collect(),
                stats.var.iter().map(|v| 1.0 / (v.as_f64() + stats.eps).sqrt()).collect(),
            ),
        };
        let shift: Vec<f64> = mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
        let xhat = kernels::channel_affine(x.data(), &inv_std, &shift);
        let g: Vec<f64> = self.value(gamma).data().iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = self.value(beta).data().iter().map(|v| v.as_f64()).collect();
        let out = kernels::channel_affine(&xhat, &g, &b);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat: if self.record { xhat } else { Vec::new() },
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        Ok(self.push(op, value, &[input, gamma, beta]))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| v.max(R::zero()));
        self.push(Op::Relu(input), value, &[input])
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let mut value = self.value(lhs).clone();
        value.add_assign(self.value(rhs))?;
        Ok(self.push(Op::Add(lhs, rhs), value, &[lhs, rhs]))
    }

    /// `max(0, x[.., c] - t[c])` with `t` taken from a per-channel vector.
    /// No gradient ever flows into `threshold`.
    pub fn threshold_relu(&mut self, input: NodeId, threshold: NodeId) -> Result<NodeId> {
        let c = self.value(input).channels();
        let t = self.value(threshold).data().to_vec();
        if t.len() != c {
            return Err(Error::shape(
                "threshold_relu",
                format!("input has {c} channels, threshold has {}", t.len()),
            ));
        }
        let x = self.value(input);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(c) {
            out.extend(row.iter().zip(&t).map(|(&v, &th)| (v - th).max(R::zero())));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        // The threshold is deliberately not listed as a differentiable input.
        Ok(self.push(Op::Threshold { input, threshold }, value, &[input]))
    }

    pub fn max_pool2d(&mut self, input: NodeId, pool: usize) -> Result<NodeId> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 4 || pool == 0 || !s[1].is_multiple_of(pool) || !s[2].is_multiple_of(pool) {
            return Err(Error::shape(
                "max_pool2d",
                format!("input {s:?} is not [B,H,W,C] divisible by pool {pool}"),
            ));
        }
        let (values, argmax) =
            kernels::max_pool_forward(self.value(input).data(), s[0], s[1], s[2], s[3], pool);
        let value = Tensor::new(vec![s[0], s[1] / pool, s[2] / pool, s[3]], values)?;
        let argmax = if self.record { argmax } else { Vec::new() };
        Ok(self.push(Op::MaxPool { input, argmax }, value, &[input]))
    }

    /// Appends two channels holding the row and column coordinate of each
    /// cell, scaled to `[-1, 1]`.
    pub fn append_coords(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("append_coords", format!("input {s:?} is not [B,H,W,C]")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let coord = |i: usize, n: usize| {
            if n <= 1 {
                R::zero()
            } else {
                R::of(2.0 * i as f64 / (n - 1) as f64 - 1.0)
            }
        };
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * h * w * (c + 2));
        for bi in 0..b {
            for y in 0..h {
                for xi in 0..w {
                    let src = ((bi * h + y) * w + xi) * c;
                    out.extend_from_slice(&x[src..src + c]);
                    out.push(coord(y, h));
                    out.push(coord(xi, w));
                }
            }
        }
        let value = Tensor::new(vec![b, h, w, c + 2], out)?;
        Ok(self.push(Op::AppendCoords { input, channels: c }, value, &[input]))
    }

    /// Collapses all axes after the first: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let b = v.shape()[0];
        let rest = v.len() / b;
        let value = v.clone().reshape(vec![b, rest]).expect("flatten preserves size");
        self.push(Op::Reshape(input), value, &[input])
    }

    pub fn reshape(&mut self, input: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(input), value, &[input]))
    }

    /// `[B, In] x [In, Out] + [Out]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::shape(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (b, fin, fout) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(b * fout);
        for _ in 0..b {
            out.extend_from_slice(self.value(bias).data());
        }
        R::gemm(
            b,
            fin,
            fout,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            true,
        );
        let value = Tensor::new(vec![b, fout], out)?;
        Ok(self.push(Op::Dense { input, weight, bias }, value, &[input, weight, bias]))
    }

    /// Mean cross-entropy of `logits[.., K]` against one class index per row.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let k = v.channels();
        let rows = v.len() / k;
        if targets.len() != rows {
            return Err(Error::shape(
                "softmax_xent",
                format!("{rows} logit rows but {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::TargetOutOfRange { target: t, classes: k });
        }
        let (loss, probs) = kernels::softmax_xent(v.data(), targets, k);
        let op = Op::SoftmaxXent {
            logits,
            probs: if self.record { probs } else { Vec::new() },
            targets: targets.to_vec(),
        };
        Ok(self.push(op, Tensor::scalar(R::of(loss)), &[logits]))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self
            .value(input)
            .map(|v| R::one() / (R::one() + (-v).exp()));
        self.push(Op::Sigmoid(input), value, &[input])
    }

    /// `mean(|x|)` as a scalar.
    pub fn mean_abs(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let m = v.data().iter().map(|x| x.as_f64().abs()).sum::<f64>() / v.len() as f64;
        self.push(Op::MeanAbs(input), Tensor::scalar(R::of(m)), &[input])
    }

    /// `KL(Bernoulli(rho) || Bernoulli(mean(x)))` in nats, with the mean
    /// clamped to `[1e-7, 1 - 1e-7]`. Clamped means pass no gradient.
    pub fn bernoulli_kl(&mut self, input: NodeId, rho: f64) -> Result<NodeId> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidArgument(format!("KL target {rho} outside (0,1)")));
        }
        let v = self.value(input);
        let raw = v.data().iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64;
        let m = raw.clamp(1e-7, 1.0 - 1e-7);
        let kl = bernoulli_kl(rho, m);
        let slope = if m == raw {
            (-rho / m + (1.0 - rho) / (1.0 - m)) / v.len() as f64
        } else {
            0.0
        };
        Ok(self.push(
            Op::BernoulliKl { input, slope },
            Tensor::scalar(R::of(kl)),
            &[input],
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().map(|x| x.as_f64()).sum::<f64>();
        self.push(Op::Sum(input), Tensor::scalar(R::of(s)), &[input])
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let f = R::of(factor);
        let value = self.value(input).map(|v| v * f);
        self.push(Op::Scale { input, factor }, value, &[input])
    }

    /// `sum(w * x)` for a fixed weight tensor of the same size as `x`.
    pub fn weighted_sum(&mut self, input: NodeId, weights: &Tensor<R>) -> Result<NodeId> {
        let v = self.value(input);
        if v.shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", v.shape(), weights.shape()),
            ));
        }
        let s: f64 = v
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let op = Op::WeightedSum {
            input,
            weights: weights.data().to_vec(),
        };
        Ok(self.push(op, Tensor::scalar(R::of(s)), &[input]))
    }

    /// Reverse sweep from a scalar `loss`, accumulating gradients into every
    /// node that requires one.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.record {
            return Err(Error::InvalidArgument("backward on an inference graph".into()));
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(shape, R::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &grad)?;
            self.nodes[i].grad = Some(grad);
            for (target, g) in contributions {
                match &mut self.nodes[target.0].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn like(&self, id: NodeId, data: Vec<R>) -> Result<Tensor<R>> {
        Tensor::new(self.value(id).shape().to_vec(), data)
    }

    fn local_grads(&self, i: usize, grad: &Tensor<R>) -> Result<Vec<(NodeId, Tensor<R>)>> {
        let g = grad.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let geo = geometry;
                if self.needs_grad(*bias) {
                    let db = kernels::channel_sums(g, geo.out_channels);
                    out.push((*bias, self.like(*bias, db.into_iter().map(R::of).collect())?));
                }
                let (dk, dx) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geo,
                    self.needs_grad(*kernel),
                    self.needs_grad(*input),
                );
                if let Some(dk) = dk {
                    out.push((*kernel, self.like(*kernel, dk)?));
                }
                if let Some(dx) = dx {
                    out.push((*input, self.like(*input, dx)?));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let gam: Vec<f64> = self.value(*gamma).data().iter().map(|v| v.as_f64()).collect();
                if self.needs_grad(*gamma) {
                    let dg = kernels::channel_dot(g, xhat, c);
                    out.push((*gamma, self.like(*gamma, dg.into_iter().map(R::of).collect())?));
                }
                if self.needs_grad(*beta) {
                    let db = kernels::channel_sums(g, c);
                    out.push((*beta, self.like(*beta, db.into_iter().map(R::of).collect())?));
                }
                if self.needs_grad(*input) {
                    let scale: Vec<f64> = gam.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                    let dx = if *batch_stats {
                        kernels::batch_norm_input_grad(g, xhat, &scale, c)
                    } else {
                        kernels::channel_affine(g, &scale, &vec![0.0; c])
                    };
                    out.push((*input, self.like(*input, dx)?));
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > R::zero() { gv } else { R::zero() })
                    .collect();
                out.push((*input, self.like(*input, dx)?));
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.needs_grad(*id) {
                        out.push((*id, grad.clone()));
                    }
                }
            }
            Op::Threshold { input, .. } => {
                // The output is positive exactly where x - t > 0.
                let y = self.nodes[i].value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| if yv > R::zero() { gv } else { R::zero() })
                    .collect();
                out.push((*input, self.like(*input, dx)?));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![R::zero(); self.value(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] = dx[idx] + gv;
                }
                out.push((*input, self.like(*input, dx)?));
            }
            Op::AppendCoords { input, channels } => {
                let c = *channels;
                let dx = g
                    .chunks_exact(c + 2)
                    .flat_map(|row| row[..c].iter().copied())
                    .collect();
                out.push((*input, self.like(*input, dx)?));
            }
            Op::Reshape(input) => {
                out.push((*input, self.like(*input, g.to_vec())?));
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input).shape();
                let (b, fin) = (xs[0], xs[1]);
                let fout = self.value(*weight).shape()[1];
                if self.needs_grad(*weight) {
                    let mut dw = vec![R::zero(); fin * fout];
                    R::gemm(fin, b, fout, self.value(*input).data(), true, g, false, &mut dw, false);
                    out.push((*weight, self.like(*weight, dw)?));
                }
                if self.needs_grad(*bias) {
                    let db = kernels::channel_sums(g, fout);
                    out.push((*bias, self.like(*bias, db.into_iter().map(R::of).collect())?));
                }
                if self.needs_grad(*input) {
                    let mut dx = vec![R::zero(); b * fin];
                    R::gemm(b, fout, fin, g, false, self.value(*weight).data(), true, &mut dx, false);
                    out.push((*input, self.like(*input, dx)?));
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
            } => {
                let k = self.value(*logits).channels();
                let scale = g[0].as_f64() / targets.len() as f64;
                let mut dx: Vec<R> = probs.iter().map(|p| R::of(p.as_f64() * scale)).collect();
                for (row, &t) in targets.iter().enumerate() {
                    let j = row * k + t;
                    dx[j] = dx[j] - R::of(scale);
                }
                out.push((*logits, self.like(*logits, dx)?));
            }
            Op::Sigmoid(input) => {
                let y = self.nodes[i].value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (R::one() - yv))
                    .collect();
                out.push((*input, self.like(*input, dx)?));
            }
            Op::MeanAbs(input) => {
                let x = self.value(*input).data();
                let s = g[0].as_f64() / x.len() as f64;
                let dx = x
                    .iter()
                    .map(|v| {
                        let v = v.as_f64();
                        R::of(if v > 0.0 {
                            s
                        } else if v < 0.0 {
                            -s
                        } else {
                            0.0
                        })
                    })
                    .collect();
                out.push((*input, self.like(*input, dx)?));
            }
            Op::BernoulliKl { input, slope } => {
                let n = self.value(*input).len();
                let d = R::of(g[0].as_f64() * slope);
                out.push((*input, self.like(*input, vec![d; n])?));
            }
            Op::Sum(input) => {
                let n = self.value(*input).len();
                out.push((*input, self.like(*input, vec![g[0]; n])?));
            }
            Op::Scale { input, factor } => {
                let f = R::of(*factor);
                out.push((*input, self.like(*input, g.iter().map(|&v| v * f).collect())?));
            }
            Op::WeightedSum { input, weights } => {
                let dx = weights.iter().map(|&w| w * g[0]).collect();
                out.push((*input, self.like(*input, dx)?));
            }
        }
        Ok(out)
    }
}

/// `KL(Bernoulli(p) || Bernoulli(q))` in nats.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}
