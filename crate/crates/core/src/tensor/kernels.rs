//! Pure forward kernels shared by the gradient tape and the inference paths.
//!
//! Conventions:
//! * activations are `[N, D]` or `[N, C, H, W]`, channel axis 1;
//! * linear weights are `[out, in]`, conv weights `[out, in, k, k]`;
//! * conv is cross-correlation (no kernel flip) with symmetric zero padding;
//! * every inner product / reduction accumulates in f64 and rounds once.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(CoreError::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", sa, sb),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for t in 0..k {
                acc += ad[i * k + t] as f64 * bd[t * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `y = x w^T + b` with `x: [N, D]`, `w: [O, D]`, `b: [O]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sx, sw, sbias) = (x.shape(), w.shape(), b.shape());
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sbias != [sw[0]] {
        return Err(CoreError::ShapeMismatch {
            op: "linear",
            detail: format!("x {:?}, w {:?}, b {:?}", sx, sw, sbias),
        });
    }
    let (n, d, o) = (sx[0], sx[1], sw[0]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0f32; n * o];
    for i in 0..n {
        for j in 0..o {
            let mut acc = bd[j] as f64;
            for t in 0..d {
                acc += xd[i * d + t] as f64 * wd[j * d + t] as f64;
            }
            out[i * o + j] = acc as f32;
        }
    }
    Tensor::from_vec(vec![n, o], out)
}

/// Output spatial size of a conv/pool window, erroring when the window
/// does not tile the padded input exactly.
fn conv_out_dim(op: &'static str, h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = h + 2 * pad;
    if span < k || (span - k) % stride != 0 {
        return Err(CoreError::ShapeMismatch {
            op,
            detail: format!(
                "input {} with kernel {} stride {} pad {} gives a fractional output size",
                h, k, stride, pad
            ),
        });
    }
    Ok((span - k) / stride + 1)
}

/// Cross-correlation `x: [N, C, H, W]` with `w: [O, C, k, k]`, optional bias `[O]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            detail: format!("x {:?}, w {:?}", sx, sw),
        });
    }
    let k = sw[2];
    if k % 2 == 0 || stride == 0 {
        return Err(CoreError::InvalidArgument {
            op: "conv2d",
            detail: format!("kernel {} must be odd, stride {} positive", k, stride),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [sw[0]] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {:?} for {} output channels", b.shape(), sw[0]),
            });
        }
    }
    let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let o = sw[0];
    let oh = conv_out_dim("conv2d", h, k, stride, pad)?;
    let ow = conv_out_dim("conv2d", wd, k, stride, pad)?;
    let xd = x.data();
    let kd = w.data();
    let mut out = vec![0.0f32; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            let base_bias = bias.map_or(0.0, |b| b.data()[oi] as f64);
            for yi in 0..oh {
                for xi in 0..ow {
                    let mut acc = base_bias;
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
                                let xv = xd[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let kv = kd[((oi * c + ci) * k + ky) * k + kx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + yi) * ow + xi] = acc as f32;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, o, oh, ow], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("same shape")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Non-overlapping average pooling with window == stride == `k`.
pub fn avgpool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(CoreError::ShapeMismatch {
            op: "avgpool2d",
            detail: format!("expected [N,C,H,W], got {:?}", s),
        });
    }
    if k == 0 || s[2] % k != 0 || s[3] % k != 0 {
        return Err(CoreError::InvalidArgument {
            op: "avgpool2d",
            detail: format!("window {} does not tile spatial dims {}x{}", k, s[2], s[3]),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let xd = x.data();
    let inv = 1.0f64 / (k * k) as f64;
    let mut out = vec![0.0f32; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for yi in 0..oh {
                for xi in 0..ow {
                    let mut acc = 0.0f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += xd[((ni * c + ci) * h + yi * k + ky) * w + xi * k + kx] as f64;
                        }
                    }
                    out[((ni * c + ci) * oh + yi) * ow + xi] = (acc * inv) as f32;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], out)
}

/// Mean over the full spatial extent: `[N, C, H, W] -> [N, C]`.
pub fn global_avgpool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(CoreError::ShapeMismatch {
            op: "global_avgpool",
            detail: format!("expected [N,C,H,W], got {:?}", s),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let xd = x.data();
    let inv = 1.0f64 / (h * w) as f64;
    let mut out = vec![0.0f32; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0f64;
            for p in 0..h * w {
                acc += xd[(ni * c + ci) * h * w + p] as f64;
            }
            out[ni * c + ci] = (acc * inv) as f32;
        }
    }
    Tensor::from_vec(vec![n, c], out)
}

/// Per-channel element count when reducing everything except axis 1.
pub fn channel_reduce_count(shape: &[usize]) -> Result<usize> {
    match shape.len() {
        2 => Ok(shape[0]),
        4 => Ok(shape[0] * shape[2] * shape[3]),
        _ => Err(CoreError::ShapeMismatch {
            op: "channel_moments",
            detail: format!("expected [N,C] or [N,C,H,W], got {:?}", shape),
        }),
    }
}

/// Per-channel mean and biased variance over all non-channel axes.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let s = x.shape();
    let m = channel_reduce_count(s)? as f64;
    let c = s[1];
    let xd = x.data();
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    for_each_channel_elem(s, |ci, idx| {
        let v = xd[idx] as f64;
        sum[ci] += v;
        sumsq[ci] += v * v;
    });
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mu = sum[ci] / m;
        mean[ci] = mu as f32;
        var[ci] = ((sumsq[ci] / m - mu * mu).max(0.0)) as f32;
    }
    Ok((mean, var))
}

/// Visits every element of a `[N,C]` or `[N,C,H,W]` tensor with its channel.
pub(crate) fn for_each_channel_elem(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    match shape.len() {
        2 => {
            let (n, c) = (shape[0], shape[1]);
            for ni in 0..n {
                for ci in 0..c {
                    f(ci, ni * c + ci);
                }
            }
        }
        4 => {
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for p in 0..h * w {
                        f(ci, base + p);
                    }
                }
            }
        }
        _ => unreachable!("channel iteration on rank {}", shape.len()),
    }
}

/// Normalizes with the supplied per-channel statistics and applies the
/// affine transform: `y = gamma * (x - mean) * inv_std + beta`.
pub fn bn_apply(
    x: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<Tensor> {
    let s = x.shape();
    channel_reduce_count(s)?;
    let c = s[1];
    if mean.len() != c || inv_std.len() != c || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(CoreError::ShapeMismatch {
            op: "bn_apply",
            detail: format!("{} channels, stats {}/{}", c, mean.len(), inv_std.len()),
        });
    }
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![0.0f32; xd.len()];
    for_each_channel_elem(s, |ci, idx| {
        out[idx] = gd[ci] * (xd[idx] - mean[ci]) * inv_std[ci] + bd[ci];
    });
    Tensor::from_vec(s.to_vec(), out)
}

/// Mean softmax cross-entropy over the batch, with the row-wise softmax
/// probabilities (needed for the backward pass and for logit replay).
///
/// Log-sum-exp is shifted by the row max and summed in f64, so uniform
/// logits of any magnitude give exactly `ln(num_classes)` up to f32
/// rounding.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(CoreError::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("logits {:?}, {} labels", s, labels.len()),
        });
    }
    let (n, k) = (s[0], s[1]);
    if n == 0 {
        return Err(CoreError::InvalidArgument {
            op: "softmax_cross_entropy",
            detail: "empty batch".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(CoreError::InvalidArgument {
            op: "softmax_cross_entropy",
            detail: format!("label {} out of range for {} classes", bad, k),
        });
    }
    let ld = logits.data();
    let mut probs = vec![0.0f32; n * k];
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = &ld[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v as f64 - max).exp();
        }
        let log_denom = denom.ln() + max;
        for j in 0..k {
            probs[i * k + j] = ((row[j] as f64 - log_denom).exp()) as f32;
        }
        loss += log_denom - row[labels[i]] as f64;
    }
    let probs = Tensor::from_vec(vec![n, k], probs)?;
    Ok(((loss / n as f64) as f32, probs))
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "mse",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    if a.numel() == 0 {
        return Err(CoreError::InvalidArgument {
            op: "mse",
            detail: "empty tensors".into(),
        });
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    Ok((acc / a.numel() as f64) as f32)
}
