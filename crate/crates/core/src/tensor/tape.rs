//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! A [`GradTape`] records every forward op as a node; [`GradTape::backward`]
//! walks the tape once in reverse and returns gradients keyed by parameter
//! name. Gradient storage is f64 end to end and is rounded to f32 only in
//! the final per-parameter tensors, which keeps the finite-difference
//! comparisons in the test suite honest.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Batch-statistics normalization; `xhat` and `inv_std` are saved from
    /// the forward pass. Running-statistic bookkeeping happens outside the
    /// tape — only the differentiable batch path is recorded here.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f32,
    },
    AvgPool2d {
        x: NodeId,
        k: usize,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    /// Mean squared error against a constant target (no gradient flows
    /// into the target; replayed logits are data, not parameters).
    MseConst {
        x: NodeId,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registers a constant input (no gradient tracked by name).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers a named parameter leaf. Registering the same name twice
    /// returns the original node so that multiple forward passes on one
    /// tape share parameters and accumulate gradients.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Matmul { a, b }))
    }

    /// Bias-free convolution; the zoo always follows conv with batch norm,
    /// so a conv bias would be redundant with the norm shift.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let y = kernels::conv2d(self.value(x), self.value(w), None, stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, stride, pad }))
    }

    /// Batch-statistics normalization with affine parameters. Returns the
    /// node plus the biased batch moments so the caller can maintain
    /// running statistics.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<(NodeId, Vec<f32>, Vec<f32>)> {
        let (mean, var) = kernels::channel_moments(self.value(x))?;
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let xd = xv.data();
        let mut xhat = vec![0.0f32; xd.len()];
        kernels::for_each_channel_elem(&shape, |ci, idx| {
            xhat[idx] = (xd[idx] - mean[ci]) * inv_std[ci];
        });
        let y = kernels::bn_apply(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma),
            self.value(beta),
        )?;
        let id = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((id, mean, var))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let y = Tensor::from_vec(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(y, Op::Scale { x, c })
    }

    pub fn avgpool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let y = kernels::avgpool2d(self.value(x), k)?;
        Ok(self.push(y, Op::AvgPool2d { x, k }))
    }

    pub fn global_avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::global_avgpool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).reshaped(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Mean softmax cross-entropy; produces a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared error against a constant target; produces a scalar node.
    pub fn mse_const(&mut self, x: NodeId, target: &Tensor) -> Result<NodeId> {
        let loss = kernels::mse(self.value(x), target)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseConst {
                x,
                target: target.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar node. Returns gradients for every named
    /// parameter that the loss actually depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::InvalidArgument {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        // One f64 gradient buffer per node, allocated lazily.
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(gy); // keep for collection below
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, d) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    let (xd, wd) = (xv.data(), wv.data());
                    let gx = ensure(&mut grads, *x, n * d);
                    for ni in 0..n {
                        for di in 0..d {
                            let mut acc = 0.0f64;
                            for oi in 0..o {
                                acc += gy[ni * o + oi] * wd[oi * d + di] as f64;
                            }
                            gx[ni * d + di] += acc;
                        }
                    }
                    let gw = ensure(&mut grads, *w, o * d);
                    for oi in 0..o {
                        for di in 0..d {
                            let mut acc = 0.0f64;
                            for ni in 0..n {
                                acc += gy[ni * o + oi] * xd[ni * d + di] as f64;
                            }
                            gw[oi * d + di] += acc;
                        }
                    }
                    let gb = ensure(&mut grads, *b, o);
                    for oi in 0..o {
                        let mut acc = 0.0f64;
                        for ni in 0..n {
                            acc += gy[ni * o + oi];
                        }
                        gb[oi] += acc;
                    }
                }
                Op::Matmul { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let (ad, bd) = (av.data(), bv.data());
                    let ga = ensure(&mut grads, *a, m * k);
                    for mi in 0..m {
                        for ki in 0..k {
                            let mut acc = 0.0f64;
                            for ni in 0..n {
                                acc += gy[mi * n + ni] * bd[ki * n + ni] as f64;
                            }
                            ga[mi * k + ki] += acc;
                        }
                    }
                    let gb = ensure(&mut grads, *b, k * n);
                    for ki in 0..k {
                        for ni in 0..n {
                            let mut acc = 0.0f64;
                            for mi in 0..m {
                                acc += ad[mi * k + ki] as f64 * gy[mi * n + ni];
                            }
                            gb[ki * n + ni] += acc;
                        }
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    self.conv2d_backward(*x, *w, *stride, *pad, &gy, i, &mut grads);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let shape = self.value(*x).shape().to_vec();
                    let c = shape[1];
                    let m = kernels::channel_reduce_count(&shape).expect("checked in forward") as f64;
                    let gv = self.value(*gamma).data();
                    // Channel sums needed by the batch-statistics backward.
                    let mut sum_dxhat = vec![0.0f64; c];
                    let mut sum_dxhat_xhat = vec![0.0f64; c];
                    let mut g_gamma = vec![0.0f64; c];
                    let mut g_beta = vec![0.0f64; c];
                    kernels::for_each_channel_elem(&shape, |ci, idx| {
                        let dxhat = gy[idx] * gv[ci] as f64;
                        sum_dxhat[ci] += dxhat;
                        sum_dxhat_xhat[ci] += dxhat * xhat[idx] as f64;
                        g_gamma[ci] += gy[idx] * xhat[idx] as f64;
                        g_beta[ci] += gy[idx];
                    });
                    let gx = ensure(&mut grads, *x, gy.len());
                    kernels::for_each_channel_elem(&shape, |ci, idx| {
                        let dxhat = gy[idx] * gv[ci] as f64;
                        gx[idx] += inv_std[ci] as f64 / m
                            * (m * dxhat - sum_dxhat[ci] - xhat[idx] as f64 * sum_dxhat_xhat[ci]);
                    });
                    {
                        let gg = ensure(&mut grads, *gamma, c);
                        for ci in 0..c {
                            gg[ci] += g_gamma[ci];
                        }
                    }
                    let gb = ensure(&mut grads, *beta, c);
                    for ci in 0..c {
                        gb[ci] += g_beta[ci];
                    }
                }
                Op::Relu { x } => {
                    let xd = self.value(*x).data();
                    let gx = ensure(&mut grads, *x, gy.len());
                    for (j, &g) in gy.iter().enumerate() {
                        if xd[j] > 0.0 {
                            gx[j] += g;
                        }
                    }
                }
                Op::Add { a, b } => {
                    let ga = ensure(&mut grads, *a, gy.len());
                    for (j, &g) in gy.iter().enumerate() {
                        ga[j] += g;
                    }
                    let gb = ensure(&mut grads, *b, gy.len());
                    for (j, &g) in gy.iter().enumerate() {
                        gb[j] += g;
                    }
                }
                Op::Scale { x, c } => {
                    let gx = ensure(&mut grads, *x, gy.len());
                    for (j, &g) in gy.iter().enumerate() {
                        gx[j] += g * *c as f64;
                    }
                }
                Op::AvgPool2d { x, k } => {
                    let s = self.value(*x).shape().to_vec();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0f64 / (k * k) as f64;
                    let gx = ensure(&mut grads, *x, n * c * h * w);
                    for ni in 0..n {
                        for ci in 0..c {
                            for yi in 0..oh {
                                for xi in 0..ow {
                                    let g = gy[((ni * c + ci) * oh + yi) * ow + xi] * inv;
                                    for ky in 0..*k {
                                        for kx in 0..*k {
                                            gx[((ni * c + ci) * h + yi * k + ky) * w
                                                + xi * k
                                                + kx] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let s = self.value(*x).shape().to_vec();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let inv = 1.0f64 / (h * w) as f64;
                    let gx = ensure(&mut grads, *x, n * c * h * w);
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = gy[ni * c + ci] * inv;
                            for p in 0..h * w {
                                gx[(ni * c + ci) * h * w + p] += g;
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    let gx = ensure(&mut grads, *x, gy.len());
                    for (j, &g) in gy.iter().enumerate() {
                        gx[j] += g;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let g = gy[0];
                    let (n, k) = (probs.shape()[0], probs.shape()[1]);
                    let pd = probs.data();
                    let inv_n = 1.0f64 / n as f64;
                    let gl = ensure(&mut grads, *logits, n * k);
                    for ni in 0..n {
                        for ki in 0..k {
                            let indicator = if labels[ni] == ki { 1.0 } else { 0.0 };
                            gl[ni * k + ki] += g * inv_n * (pd[ni * k + ki] as f64 - indicator);
                        }
                    }
                }
                Op::MseConst { x, target } => {
                    let g = gy[0];
                    let xd = self.value(*x).data();
                    let td = target.data();
                    let inv = 2.0f64 / xd.len() as f64;
                    let gx = ensure(&mut grads, *x, xd.len());
                    for j in 0..xd.len() {
                        gx[j] += g * inv * (xd[j] as f64 - td[j] as f64);
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = &grads[id.0] {
                let shape = self.value(*id).shape().to_vec();
                let data: Vec<f32> = g.iter().map(|&v| v as f32).collect();
                out.insert(name.clone(), Tensor::from_vec(shape, data)?);
            }
        }
        Ok(Gradients { map: out })
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        gy: &[f64],
        out_node: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let os = self.nodes[out_node].value.shape().to_vec();
        let (n, c, h, wd) = (
            xv.shape()[0],
            xv.shape()[1],
            xv.shape()[2],
            xv.shape()[3],
        );
        let (o, k) = (wv.shape()[0], wv.shape()[2]);
        let (oh, ow) = (os[2], os[3]);
        let xd = xv.data();
        let kd = wv.data();
        // Scatter pattern mirrors the forward loop exactly so the oracle
        // comparison is an apples-to-apples accumulation order.
        {
            let gx = ensure_id(grads, x, n * c * h * wd);
            for ni in 0..n {
                for oi in 0..o {
                    for yi in 0..oh {
                        for xi in 0..ow {
                            let g = gy[((ni * o + oi) * oh + yi) * ow + xi];
                            for ci in 0..c {
                                for ky in 0..k {
                                    let iy = (yi * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (xi * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        gx[((ni * c + ci) * h + iy as usize) * wd + ix as usize] +=
                                            g * kd[((oi * c + ci) * k + ky) * k + kx] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let gw = ensure_id(grads, w, o * c * k * k);
        for ni in 0..n {
            for oi in 0..o {
                for yi in 0..oh {
                    for xi in 0..ow {
                        let g = gy[((ni * o + oi) * oh + yi) * ow + xi];
                        for ci in 0..c {
                            for ky in 0..k {
                                let iy = (yi * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (xi * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    gw[((oi * c + ci) * k + ky) * k + kx] += g
                                        * xd[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                            as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    ensure_id(grads, id, len)
}

fn ensure_id(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// Per-parameter gradients keyed by name, in deterministic (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Errors if any of `names` has no recorded gradient — a parameter the
    /// loss never touched must be reported, not silently treated as zero.
    pub fn require_all<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for name in names {
            if !self.map.contains_key(name) {
                return Err(CoreError::MissingGradient { name: name.into() });
            }
        }
        Ok(())
    }

    /// Flat inner product over the union of keys; a key present on one side
    /// only contributes nothing (its counterpart is an all-zero gradient).
    pub fn dot(&self, other: &Gradients) -> f64 {
        let mut acc = 0.0f64;
        for (name, g) in &self.map {
            if let Some(h) = other.map.get(name) {
                debug_assert_eq!(g.shape(), h.shape());
                for (a, b) in g.data().iter().zip(h.data()) {
                    acc += *a as f64 * *b as f64;
                }
            }
        }
        acc
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `self += c * other` (missing keys on `self` are inserted as `c * other`).
    pub fn axpy(&mut self, c: f64, other: &Gradients) {
        for (name, h) in &other.map {
            match self.map.get_mut(name) {
                Some(g) => {
                    let gd = g.data_mut();
                    for (a, b) in gd.iter_mut().zip(h.data()) {
                        *a = (*a as f64 + c * *b as f64) as f32;
                    }
                }
                None => {
                    let data: Vec<f32> = h.data().iter().map(|&v| (c * v as f64) as f32).collect();
                    self.map.insert(
                        name.clone(),
                        Tensor::from_vec(h.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.map.values().all(|t| t.is_all_finite())
    }
}
