//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every forward operation in execution order, so the
//! node list is topologically sorted by construction. [`Graph::backward`]
//! walks it once in reverse, summing gradient contributions at fan-out points.

pub(crate) mod kernels;
pub mod optim;

use kernels::{ConvGeom, PoolGeom};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm layer normalizes and whether it touches its running stats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; gamma/beta may still be trained.
    Eval,
    /// Running statistics, never updated.
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnRunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnRunningStats {
    pub fn new(channels: usize) -> Self {
        BnRunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        batch: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
        batch: usize,
    },
    Reshape {
        input: Var,
    },
    ChannelPad {
        input: Var,
    },
    ChannelCrop {
        input: Var,
    },
    Grouped1x1 {
        input: Var,
        weight: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    Sum {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A graph that never tracks gradients; `param` behaves like `input`.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::config(format!(
                "conv2d expects 4-d input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input {xs:?}, kernel {ks:?}"
            )));
        }
        if stride == 0 || ks[2] == 0 || ks[3] == 0 || ks[0] == 0 {
            return Err(Error::config("conv2d needs positive stride, kernel and channels"));
        }
        let (hp, wp) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if hp < ks[2] || wp < ks[3] {
            return Err(Error::config(format!(
                "conv2d kernel {ks:?} larger than padded input {xs:?}"
            )));
        }
        let geom = ConvGeom {
            c_in: xs[1],
            h_in: xs[2],
            w_in: xs[3],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            h_out: (hp - ks[2]) / stride + 1,
            w_out: (wp - ks[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(input).data(), xs[0], self.value(kernel).data(), &geom);
        let value = Tensor::new(vec![xs[0], geom.c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch: xs[0],
            },
            &[input, kernel],
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::config(format!(
                "linear shape mismatch: input {xs:?}, weight {ws:?}"
            )));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * o];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(Error::config(format!(
                    "linear bias shape {:?}, expected [{o}]",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(
            n,
            f,
            o,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let value = Tensor::new(vec![n, o], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, &inputs))
    }

    /// Batch normalization over `[N, C, H, W]`. In [`BnMode::Train`] the batch
    /// statistics are used and folded into `stats` with momentum
    /// [`BN_MOMENTUM`] (unbiased variance); other modes only read `stats`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnRunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::config(format!(
                "batchnorm2d expects 4-d input, got {xs:?}"
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        for (what, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running mean", stats.mean.len()),
            ("running var", stats.var.len()),
        ] {
            if len != c {
                return Err(Error::config(format!(
                    "batchnorm2d {what} has {len} entries for {c} channels"
                )));
            }
        }
        let x = self.value(input).data();
        let m = n * hw;
        let batch_stats = mode == BnMode::Train;
        let (mean, var) = if batch_stats {
            if m == 0 {
                return Err(Error::input("batchnorm2d on an empty batch"));
            }
            let mut mean = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    mean[ch] += plane.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            for v in &mut mean {
                *v /= m as f64;
            }
            for b in 0..n {
                for ch in 0..c {
                    let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let mu = mean[ch];
                    sq[ch] += plane.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
                }
            }
            let var: Vec<f32> = sq.iter().map(|s| (s / m as f64) as f32).collect();
            let mean: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
            let unbias = if m > 1 { m as f32 / (m - 1) as f32 } else { 1.0 };
            for ch in 0..c {
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut x_hat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for ((xh, o), &xv) in x_hat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                    *xh = (xv - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        self.push(out, Op::Relu { input }, &[input])
    }

    fn pool_geom(&self, input: Var, kernel: usize, stride: usize) -> Result<(PoolGeom, usize)> {
        let xs = self.shape(input);
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(Error::config(format!(
                "pool kernel {kernel} stride {stride} incompatible with input {xs:?}"
            )));
        }
        Ok((
            PoolGeom {
                channels: xs[1],
                h_in: xs[2],
                w_in: xs[3],
                kernel,
                stride,
                h_out: (xs[2] - kernel) / stride + 1,
                w_out: (xs[3] - kernel) / stride + 1,
            },
            xs[0],
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (geom, n) = self.pool_geom(input, kernel, stride)?;
        let (out, argmax) = kernels::maxpool_forward(self.value(input).data(), n, &geom);
        let value = Tensor::new(vec![n, geom.channels, geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn avgpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (geom, n) = self.pool_geom(input, kernel, stride)?;
        let out = kernels::avgpool_forward(self.value(input).data(), n, &geom);
        let value = Tensor::new(vec![n, geom.channels, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            Op::AvgPool {
                input,
                geom,
                batch: n,
            },
            &[input],
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// `[N, C, ...] -> [N, C * rest]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// Appends zero channels to a `[N, C, H, W]` tensor so it has `channels`.
    pub fn channel_pad(&mut self, input: Var, channels: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || channels < xs[1] {
            return Err(Error::config(format!("cannot pad {xs:?} to {channels} channels")));
        }
        if channels == xs[1] {
            return Ok(input);
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let x = self.value(input).data();
        let mut out = vec![0.0f32; n * channels * hw];
        for b in 0..n {
            out[b * channels * hw..(b * channels + c) * hw].copy_from_slice(&x[b * c * hw..(b + 1) * c * hw]);
        }
        let value = Tensor::new(vec![n, channels, xs[2], xs[3]], out)?;
        Ok(self.push(value, Op::ChannelPad { input }, &[input]))
    }

    /// Keeps the first `channels` channels of a `[N, C, H, W]` tensor.
    pub fn channel_crop(&mut self, input: Var, channels: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || channels > xs[1] {
            return Err(Error::config(format!(
                "cannot crop {xs:?} to {channels} channels"
            )));
        }
        if channels == xs[1] {
            return Ok(input);
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            out.extend_from_slice(&x[b * c * hw..(b * c + channels) * hw]);
        }
        let value = Tensor::new(vec![n, channels, xs[2], xs[3]], out)?;
        Ok(self.push(value, Op::ChannelCrop { input }, &[input]))
    }

    /// One shared `t×t` 1×1 convolution applied to each consecutive group of
    /// `t` channels. The channel count must already be a multiple of `t`.
    pub fn grouped_1x1(&mut self, input: Var, weight: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let t = ws.first().copied().unwrap_or(0);
        let square = ws.len() >= 2 && ws[0] == ws[1] && ws[2..].iter().all(|&d| d == 1);
        if !square || t == 0 || xs.len() != 4 || !xs[1].is_multiple_of(t) {
            return Err(Error::config(format!(
                "grouped 1x1 needs a square [t, t, 1, 1] weight dividing the channels; got weight {ws:?}, input {xs:?}"
            )));
        }
        let out = kernels::grouped_1x1_forward(
            self.value(input).data(),
            xs[0],
            xs[1],
            xs[2] * xs[3],
            self.value(weight).data(),
            t,
        );
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::Grouped1x1 { input, weight }, &[input, weight]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let mut out = self.value(input).clone();
        for o in out.data_mut() {
            *o *= factor;
        }
        self.push(out, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum { input }, &[input])
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::config(format!(
                "cross entropy expects [N, K] logits for {} labels, got {ls:?}",
                labels.len()
            )));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::input(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            let mx = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0f64;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                let e = ((v - mx) as f64).exp();
                *p = e as f32;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = (*p as f64 / z) as f32;
            }
            loss += z.ln() - (row[label] - mx) as f64;
        }
        let loss = (loss / n as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax cross entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Populates gradients of `loss` for every node that requires them.
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward called twice on the same graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage("loss does not depend on any parameter".into()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout)?;
            self.grads[i] = Some(gout);
        }
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, grad) {
                if !g.is_finite() {
                    return Err(Error::NonFinite("backward pass".into()));
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_data(&mut self, v: Var, data: Vec<f32>) {
        let shape = self.shape(v).to_vec();
        self.accumulate(v, Tensor::new(shape, data).expect("gradient shape"));
    }

    fn backprop_node(&mut self, i: usize, gout: &Tensor) -> Result<()> {
        let go = gout.data();
        // Ops are matched by reference; gradient buffers are built first and
        // accumulated afterwards to keep the borrows of `self.nodes` short.
        let mut pending: Vec<(Var, Vec<f32>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
            } => {
                let (gx, gk) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    *batch,
                    self.value(*kernel).data(),
                    geom,
                    go,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                pending.extend(gx.map(|g| (*input, g)));
                pending.extend(gk.map(|g| (*kernel, g)));
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, f) = (xs[0], xs[1]);
                let o = self.shape(*weight)[0];
                if self.wants(*input) {
                    let mut gx = vec![0.0f32; n * f];
                    kernels::gemm(
                        n,
                        o,
                        f,
                        go,
                        false,
                        self.value(*weight).data(),
                        false,
                        0.0,
                        &mut gx,
                    );
                    pending.push((*input, gx));
                }
                if self.wants(*weight) {
                    let mut gw = vec![0.0f32; o * f];
                    kernels::gemm(o, n, f, go, true, self.value(*input).data(), false, 0.0, &mut gw);
                    pending.push((*weight, gw));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut gb = vec![0.0f32; o];
                    for row in go.chunks(o) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    pending.push((b, gb));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*input);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = (n * hw) as f32;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for (&d, &xh) in go[r.clone()].iter().zip(&x_hat[r]) {
                            sum_dy[ch] += d as f64;
                            sum_dy_xhat[ch] += (d * xh) as f64;
                        }
                    }
                }
                if self.wants(*input) {
                    let g = self.value(*gamma).data();
                    let mut gx = vec![0.0f32; go.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            let k = g[ch] * inv_std[ch];
                            if *batch_stats {
                                let sd = sum_dy[ch] as f32;
                                let sdx = sum_dy_xhat[ch] as f32;
                                for ((o, &d), &xh) in
                                    gx[r.clone()].iter_mut().zip(&go[r.clone()]).zip(&x_hat[r])
                                {
                                    *o = k / m * (m * d - sd - xh * sdx);
                                }
                            } else {
                                for (o, &d) in gx[r.clone()].iter_mut().zip(&go[r]) {
                                    *o = k * d;
                                }
                            }
                        }
                    }
                    pending.push((*input, gx));
                }
                if self.wants(*gamma) {
                    pending.push((*gamma, sum_dy_xhat.iter().map(|&v| v as f32).collect()));
                }
                if self.wants(*beta) {
                    pending.push((*beta, sum_dy.iter().map(|&v| v as f32).collect()));
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gx = x
                    .iter()
                    .zip(go)
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                pending.push((*input, gx));
            }
            Op::MaxPool { input, argmax } => {
                let mut gx = vec![0.0f32; self.value(*input).numel()];
                for (&a, &g) in argmax.iter().zip(go) {
                    gx[a as usize] += g;
                }
                pending.push((*input, gx));
            }
            Op::AvgPool { input, geom, batch } => {
                pending.push((*input, kernels::avgpool_backward(go, *batch, geom)));
            }
            Op::Reshape { input } => pending.push((*input, go.to_vec())),
            Op::ChannelPad { input } => {
                let xs = self.shape(*input);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let padded = gout.shape()[1];
                let mut gx = Vec::with_capacity(n * c * hw);
                for b in 0..n {
                    gx.extend_from_slice(&go[b * padded * hw..(b * padded + c) * hw]);
                }
                pending.push((*input, gx));
            }
            Op::ChannelCrop { input } => {
                let xs = self.shape(*input);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let kept = gout.shape()[1];
                let mut gx = vec![0.0f32; n * c * hw];
                for b in 0..n {
                    gx[b * c * hw..(b * c + kept) * hw]
                        .copy_from_slice(&go[b * kept * hw..(b + 1) * kept * hw]);
                }
                pending.push((*input, gx));
            }
            Op::Grouped1x1 { input, weight } => {
                let xs = self.shape(*input);
                let t = self.shape(*weight)[0];
                let (gx, gw) = kernels::grouped_1x1_backward(
                    self.value(*input).data(),
                    xs[0],
                    xs[1],
                    xs[2] * xs[3],
                    self.value(*weight).data(),
                    t,
                    go,
                    self.wants(*input),
                    self.wants(*weight),
                );
                pending.extend(gx.map(|g| (*input, g)));
                pending.extend(gw.map(|g| (*weight, g)));
            }
            Op::Add { a, b } => {
                pending.push((*a, go.to_vec()));
                pending.push((*b, go.to_vec()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                pending.push((*a, go.iter().zip(bv).map(|(g, y)| g * y).collect()));
                pending.push((*b, go.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::Scale { input, factor } => {
                pending.push((*input, go.iter().map(|g| g * factor).collect()));
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                pending.push((*input, vec![go[0]; n]));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = go[0] / n as f32;
                let mut gx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * k + l] -= scale;
                }
                pending.push((*logits, gx));
            }
        }
        for (v, g) in pending {
            if self.wants(v) {
                self.accumulate_data(v, g);
            }
        }
        Ok(())
    }
}
