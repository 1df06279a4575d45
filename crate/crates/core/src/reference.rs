//! Independent f64 reference implementations used as test oracles.
//!
//! Everything here is written separately from the production kernels — no
//! shared loop bodies, different traversal orders where sensible — so the
//! test suites can compare the two paths without circularity:
//!
//! * straight-line f64 forward passes for every layer and for each zoo
//!   architecture (the target of central-finite-difference gradient checks);
//! * an exhaustive linear-assignment solver for small matrices.
//!
//! This module is compiled into the crate so integration tests and the
//! acceptance suite can share it, but it is not part of the public API
//! surface (`doc(hidden)` at the crate root) and nothing in the production
//! code calls into it.

use std::collections::BTreeMap;

use crate::nn::{ArchId, ModelArch, ParamSet};
use crate::tensor::Tensor;

/// Dense f64 tensor for oracle arithmetic.
#[derive(Debug, Clone)]
pub struct RefTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RefTensor {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub fn params_to_f64(ps: &ParamSet) -> BTreeMap<String, RefTensor> {
    ps.iter()
        .map(|(n, t)| (n.clone(), RefTensor::from_tensor(t)))
        .collect()
}

// ---------------------------------------------------------------------------
// Layer primitives.

pub fn linear(x: &RefTensor, w: &RefTensor, b: &RefTensor) -> RefTensor {
    let (n, d) = (x.shape[0], x.shape[1]);
    let o = w.shape[0];
    assert_eq!(w.shape[1], d);
    let mut out = RefTensor::zeros(&[n, o]);
    for i in 0..n {
        for j in 0..o {
            let mut acc = b.data[j];
            for t in 0..d {
                acc += x.data[i * d + t] * w.data[j * d + t];
            }
            out.data[i * o + j] = acc;
        }
    }
    out
}

/// Cross-correlation written as an input-scatter (the production kernel
/// gathers over output positions instead).
pub fn conv2d(x: &RefTensor, w: &RefTensor, stride: usize, pad: usize) -> RefTensor {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    assert_eq!(w.shape[1], c);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = RefTensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.data[((ni * c + ci) * h + iy) * wd + ix];
                    if xv == 0.0 {
                        continue;
                    }
                    for oi in 0..o {
                        for ky in 0..k {
                            let oy_num = iy + pad;
                            if oy_num < ky || (oy_num - ky) % stride != 0 {
                                continue;
                            }
                            let yi = (oy_num - ky) / stride;
                            if yi >= oh {
                                continue;
                            }
                            for kx in 0..k {
                                let ox_num = ix + pad;
                                if ox_num < kx || (ox_num - kx) % stride != 0 {
                                    continue;
                                }
                                let xi2 = (ox_num - kx) / stride;
                                if xi2 >= ow {
                                    continue;
                                }
                                out.data[((ni * o + oi) * oh + yi) * ow + xi2] +=
                                    xv * w.data[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn relu(x: &RefTensor) -> RefTensor {
    RefTensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn add(a: &RefTensor, b: &RefTensor) -> RefTensor {
    assert_eq!(a.shape, b.shape);
    RefTensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

pub fn avgpool2d(x: &RefTensor, k: usize) -> RefTensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut out = RefTensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for yi in 0..oh {
                for xi in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x.data[((ni * c + ci) * h + yi * k + ky) * w + xi * k + kx];
                        }
                    }
                    out.data[((ni * c + ci) * oh + yi) * ow + xi] = acc / (k * k) as f64;
                }
            }
        }
    }
    out
}

pub fn global_avgpool(x: &RefTensor) -> RefTensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = RefTensor::zeros(&[n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0;
            for p in 0..h * w {
                acc += x.data[(ni * c + ci) * h * w + p];
            }
            out.data[ni * c + ci] = acc / (h * w) as f64;
        }
    }
    out
}

/// Per-channel moments via the two-pass algorithm (the production kernel
/// uses the one-pass sum-of-squares form).
fn channel_moments(x: &RefTensor) -> (Vec<f64>, Vec<f64>) {
    let c = x.shape[1];
    let per: Vec<Vec<f64>> = (0..c)
        .map(|ci| channel_values(x, ci))
        .collect();
    let mean: Vec<f64> = per.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let var = per
        .iter()
        .zip(&mean)
        .map(|(v, &mu)| v.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64)
        .collect();
    (mean, var)
}

fn channel_values(x: &RefTensor, ci: usize) -> Vec<f64> {
    match x.shape.len() {
        2 => {
            let (n, c) = (x.shape[0], x.shape[1]);
            (0..n).map(|ni| x.data[ni * c + ci]).collect()
        }
        4 => {
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let mut out = Vec::with_capacity(n * h * w);
            for ni in 0..n {
                for p in 0..h * w {
                    out.push(x.data[(ni * c + ci) * h * w + p]);
                }
            }
            out
        }
        r => panic!("rank {} has no channel axis convention", r),
    }
}

fn bn_normalize(
    x: &RefTensor,
    mean: &[f64],
    var: &[f64],
    gamma: &RefTensor,
    beta: &RefTensor,
    eps: f64,
) -> RefTensor {
    let c = x.shape[1];
    let mut out = RefTensor::zeros(&x.shape);
    let idx_channel = |flat: usize| -> usize {
        match x.shape.len() {
            2 => flat % c,
            4 => {
                let hw = x.shape[2] * x.shape[3];
                (flat / hw) % c
            }
            _ => unreachable!(),
        }
    };
    for (flat, &v) in x.data.iter().enumerate() {
        let ci = idx_channel(flat);
        out.data[flat] = gamma.data[ci] * (v - mean[ci]) / (var[ci] + eps).sqrt() + beta.data[ci];
    }
    out
}

/// Batch-statistics normalization (training path).
pub fn batchnorm_batch(x: &RefTensor, gamma: &RefTensor, beta: &RefTensor, eps: f64) -> RefTensor {
    let (mean, var) = channel_moments(x);
    bn_normalize(x, &mean, &var, gamma, beta, eps)
}

/// Running-statistics normalization (inference path).
pub fn batchnorm_running(
    x: &RefTensor,
    gamma: &RefTensor,
    beta: &RefTensor,
    rm: &RefTensor,
    rv: &RefTensor,
    eps: f64,
) -> RefTensor {
    bn_normalize(x, &rm.data, &rv.data, gamma, beta, eps)
}

/// Mean softmax cross-entropy.
pub fn cross_entropy_mean(logits: &RefTensor, labels: &[usize]) -> f64 {
    let (n, k) = (logits.shape[0], logits.shape[1]);
    assert_eq!(n, labels.len());
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits.data[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss += denom.ln() + max - row[labels[i]];
    }
    loss / n as f64
}

pub fn mse_mean(a: &RefTensor, b: &RefTensor) -> f64 {
    assert_eq!(a.shape, b.shape);
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64
}

// ---------------------------------------------------------------------------
// Whole-architecture forward passes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the batch's own statistics (training-path semantics).
    Batch,
    /// Normalize with stored running statistics (inference semantics).
    Running,
}

/// f64 logits of a zoo model, composed layer by layer from the primitives
/// above. Mirrors the documented layer lists, not the production graph code.
pub fn forward_logits(
    arch: &ModelArch,
    params: &BTreeMap<String, RefTensor>,
    x: &RefTensor,
    mode: BnMode,
    eps: f64,
) -> RefTensor {
    let g = |name: &str| -> &RefTensor {
        params
            .get(name)
            .unwrap_or_else(|| panic!("reference forward: missing '{}'", name))
    };
    let bn = |x: &RefTensor, layer: &str| -> RefTensor {
        match mode {
            BnMode::Batch => batchnorm_batch(
                x,
                g(&format!("{}.gamma", layer)),
                g(&format!("{}.beta", layer)),
                eps,
            ),
            BnMode::Running => batchnorm_running(
                x,
                g(&format!("{}.gamma", layer)),
                g(&format!("{}.beta", layer)),
                g(&format!("{}.running_mean", layer)),
                g(&format!("{}.running_var", layer)),
                eps,
            ),
        }
    };
    let lin = |x: &RefTensor, layer: &str| -> RefTensor {
        linear(x, g(&format!("{}.weight", layer)), g(&format!("{}.bias", layer)))
    };
    let n = x.shape[0];
    match arch.id {
        ArchId::SmallMlp => {
            let d: usize = arch.input_shape.iter().product();
            let x = RefTensor {
                shape: vec![n, d],
                data: x.data.clone(),
            };
            let h1 = relu(&lin(&x, "fc1"));
            let h2 = relu(&lin(&h1, "fc2"));
            lin(&h2, "head")
        }
        ArchId::SmallConvnet => {
            let x = reshape_image(x, n, &arch.input_shape);
            let r1 = relu(&bn(&conv2d(&x, g("conv1.weight"), 1, 1), "bn1"));
            let p1 = avgpool2d(&r1, 2);
            let r2 = relu(&bn(&conv2d(&p1, g("conv2.weight"), 1, 1), "bn2"));
            let p2 = avgpool2d(&r2, 2);
            let r3 = relu(&bn(&conv2d(&p2, g("conv3.weight"), 1, 1), "bn3"));
            lin(&global_avgpool(&r3), "head")
        }
        ArchId::SmallResnet => {
            let x = reshape_image(x, n, &arch.input_shape);
            let mut trunk = relu(&bn(&conv2d(&x, g("stem.weight"), 1, 1), "stem_bn"));
            for blk in ["b1", "b2"] {
                let r1 = relu(&bn(
                    &conv2d(&trunk, g(&format!("{}.conv1.weight", blk)), 1, 1),
                    &format!("{}.bn1", blk),
                ));
                let n2 = bn(
                    &conv2d(&r1, g(&format!("{}.conv2.weight", blk)), 1, 1),
                    &format!("{}.bn2", blk),
                );
                trunk = relu(&add(&n2, &trunk));
            }
            lin(&global_avgpool(&trunk), "head")
        }
    }
}

fn reshape_image(x: &RefTensor, n: usize, input_shape: &[usize]) -> RefTensor {
    let mut shape = vec![n];
    shape.extend_from_slice(input_shape);
    assert_eq!(shape.iter().product::<usize>(), x.numel());
    RefTensor {
        shape,
        data: x.data.clone(),
    }
}

/// f64 mean cross-entropy of a zoo model on one batch.
pub fn forward_ce(
    arch: &ModelArch,
    params: &BTreeMap<String, RefTensor>,
    x: &RefTensor,
    labels: &[usize],
    mode: BnMode,
    eps: f64,
) -> f64 {
    let logits = forward_logits(arch, params, x, mode, eps);
    cross_entropy_mean(&logits, labels)
}

// ---------------------------------------------------------------------------
// Exhaustive linear assignment.

/// Checks all n! assignments in lexicographic order and keeps the first
/// strictly best one, so ties resolve to the lexicographically smallest
/// permutation. Practical up to n = 8.
pub fn brute_force_assignment(cost: &[Vec<f64>], maximize: bool) -> (Vec<usize>, f64) {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let objective = |p: &[usize]| -> f64 {
        p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    };
    let mut best = perm.clone();
    let mut best_obj = objective(&perm);
    while next_permutation(&mut perm) {
        let obj = objective(&perm);
        let better = if maximize { obj > best_obj } else { obj < best_obj };
        if better {
            best_obj = obj;
            best = perm.clone();
        }
    }
    (best, best_obj)
}

/// Advances to the next lexicographic permutation; false after the last.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
