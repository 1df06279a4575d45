//! Activation matching, weight permutation, and interpolation.
//!
//! After each task the network trained on the new task (`theta`) is merged
//! with the network from before the task (`theta_prev`):
//!
//! 1. [`collect_activations`] forwards both networks over the rehearsal
//!    buffer in inference mode and computes, per permutation group, the
//!    cross-network Pearson correlation between channels;
//! 2. [`calc_permutation`] solves a maximum-correlation assignment per
//!    group, giving the channel order of `theta_prev` that best matches
//!    `theta`;
//! 3. [`apply_permutation`] reorders `theta_prev` accordingly (a function-
//!    preserving transformation);
//! 4. [`interpolate`] blends the aligned weights elementwise,
//!    `merged = (1 - alpha) * theta + alpha * aligned_prev`;
//! 5. the blend shrinks internal activation variance, so the statistics
//!    are repaired: [`update_batchnorm`] re-estimates normalization
//!    statistics on the buffer, and for norm-free networks
//!    [`repair_affine`] rescales each producer layer so the merged
//!    network's per-channel moments hit the convex combination of the
//!    endpoints' moments.
//!
//! [`clewi_task_step`] chains all five.

use crate::buffer::MemoryBuffer;
use crate::error::{CoreError, Result};
use crate::lsap::solve_lsap;
use crate::nn::{
    collect_batch_stats, forward_eval_hooked, ParamSet, PermGroup, Permutation, PermutationSpec,
};
use crate::tensor::Tensor;

/// Default minibatch size for activation statistics passes.
pub const ACTIVATION_BATCH: usize = 32;

/// Variances below this floor are treated as degenerate (dead channels):
/// correlations involving them are zero and repair falls back to a pure
/// shift.
const VAR_FLOOR: f64 = 1e-12;

/// Per-group activation statistics for a pair of networks `(a, b)` measured
/// on the same inputs.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub group: usize,
    pub size: usize,
    /// Observations per channel (batch x spatial positions summed over the pass).
    pub count: u64,
    /// Moments of the producer pre-activations (before the nonlinearity).
    pub pre_mean_a: Vec<f64>,
    pub pre_var_a: Vec<f64>,
    pub pre_mean_b: Vec<f64>,
    pub pre_var_b: Vec<f64>,
    /// `corr[i][j]` = Pearson correlation between post-activation channel
    /// `i` of network `a` and channel `j` of network `b`. Degenerate
    /// channels contribute zero.
    pub corr: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ActivationStats {
    pub groups: Vec<GroupStats>,
}

/// Splits a hook tensor into per-channel observation vectors.
fn per_channel_values(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = t.shape();
    let d = t.data();
    match s.len() {
        2 => {
            let (n, c) = (s[0], s[1]);
            let mut out = vec![Vec::with_capacity(n); c];
            for ni in 0..n {
                for ci in 0..c {
                    out[ci].push(d[ni * c + ci] as f64);
                }
            }
            Ok(out)
        }
        4 => {
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let mut out = vec![Vec::with_capacity(n * h * w); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for p in 0..h * w {
                        out[ci].push(d[base + p] as f64);
                    }
                }
            }
            Ok(out)
        }
        _ => Err(CoreError::ShapeMismatch {
            op: "collect_activations",
            detail: format!("hook tensor has unsupported shape {:?}", s),
        }),
    }
}

struct GroupAcc {
    size: usize,
    n: f64,
    pre_a: MomentAcc,
    pre_b: MomentAcc,
    post_a: MomentAcc,
    post_b: MomentAcc,
    cross: Vec<f64>, // size x size, sum of post_a[i] * post_b[j]
}

struct MomentAcc {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl MomentAcc {
    fn new(c: usize) -> Self {
        Self {
            sum: vec![0.0; c],
            sumsq: vec![0.0; c],
        }
    }

    fn add(&mut self, vals: &[Vec<f64>]) {
        for (ci, channel) in vals.iter().enumerate() {
            for &v in channel {
                self.sum[ci] += v;
                self.sumsq[ci] += v * v;
            }
        }
    }

    fn finalize(&self, n: f64) -> (Vec<f64>, Vec<f64>) {
        let mean: Vec<f64> = self.sum.iter().map(|&s| s / n).collect();
        let var: Vec<f64> = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(&sq, &mu)| (sq / n - mu * mu).max(0.0))
            .collect();
        (mean, var)
    }
}

/// Forwards both networks over the whole buffer in inference mode and
/// accumulates, per permutation group, the pre-activation moments of each
/// network and the cross-network post-activation correlation matrix.
/// Both networks must share an architecture.
pub fn collect_activations(
    a: &ParamSet,
    b: &ParamSet,
    buffer: &MemoryBuffer,
    batch_size: usize,
) -> Result<ActivationStats> {
    if a.arch() != b.arch() {
        return Err(CoreError::InvalidArgument {
            op: "collect_activations",
            detail: "networks have different architectures".into(),
        });
    }
    let spec = PermutationSpec::of(a.arch());
    let mut accs: Vec<GroupAcc> = spec
        .groups
        .iter()
        .map(|g| GroupAcc {
            size: g.size,
            n: 0.0,
            pre_a: MomentAcc::new(g.size),
            pre_b: MomentAcc::new(g.size),
            post_a: MomentAcc::new(g.size),
            post_b: MomentAcc::new(g.size),
            cross: vec![0.0; g.size * g.size],
        })
        .collect();

    for batch in buffer.iterate_all(batch_size)? {
        let (_, hooks_a) = forward_eval_hooked(a, &batch.x)?;
        let (_, hooks_b) = forward_eval_hooked(b, &batch.x)?;
        for ((ga, pre_a, post_a), (gb, pre_b, post_b)) in hooks_a.iter().zip(&hooks_b) {
            debug_assert_eq!(ga, gb, "hook order must match across networks");
            let acc = &mut accs[*ga];
            let pa = per_channel_values(pre_a)?;
            let pb = per_channel_values(pre_b)?;
            let qa = per_channel_values(post_a)?;
            let qb = per_channel_values(post_b)?;
            let c = acc.size;
            acc.n += qa[0].len() as f64;
            acc.pre_a.add(&pa);
            acc.pre_b.add(&pb);
            acc.post_a.add(&qa);
            acc.post_b.add(&qb);
            for i in 0..c {
                for j in 0..c {
                    let mut dot = 0.0f64;
                    for (x, y) in qa[i].iter().zip(&qb[j]) {
                        dot += x * y;
                    }
                    acc.cross[i * c + j] += dot;
                }
            }
        }
    }

    let groups = spec
        .groups
        .iter()
        .zip(accs)
        .map(|(g, acc)| {
            let n = acc.n;
            let (pre_mean_a, pre_var_a) = acc.pre_a.finalize(n);
            let (pre_mean_b, pre_var_b) = acc.pre_b.finalize(n);
            let (post_mean_a, post_var_a) = acc.post_a.finalize(n);
            let (post_mean_b, post_var_b) = acc.post_b.finalize(n);
            let c = acc.size;
            let mut corr = vec![vec![0.0f64; c]; c];
            for i in 0..c {
                for j in 0..c {
                    let cov = acc.cross[i * c + j] / n - post_mean_a[i] * post_mean_b[j];
                    let denom = post_var_a[i] * post_var_b[j];
                    corr[i][j] = if denom > VAR_FLOOR * VAR_FLOOR {
                        cov / denom.sqrt()
                    } else {
                        0.0
                    };
                }
            }
            GroupStats {
                group: g.id,
                size: c,
                count: n as u64,
                pre_mean_a,
                pre_var_a,
                pre_mean_b,
                pre_var_b,
                corr,
            }
        })
        .collect();
    Ok(ActivationStats { groups })
}

/// Solves the per-group maximum-correlation assignment. Returns the gather
/// arrays (channel `i` of the first network matches channel `perm[i]` of
/// the second) plus each group's mean matched correlation as a diagnostic.
pub fn permutation_from_stats(stats: &ActivationStats) -> Result<(Permutation, Vec<(usize, f64)>)> {
    let mut maps = std::collections::BTreeMap::new();
    let mut diag = Vec::with_capacity(stats.groups.len());
    for g in &stats.groups {
        let assignment = solve_lsap(&g.corr, true)?;
        let mean_corr = if g.size > 0 {
            assignment
                .perm
                .iter()
                .enumerate()
                .map(|(i, &j)| g.corr[i][j])
                .sum::<f64>()
                / g.size as f64
        } else {
            0.0
        };
        diag.push((g.group, mean_corr));
        maps.insert(g.group, assignment.perm);
    }
    Ok((Permutation::from_maps(maps), diag))
}

/// Activation-matching permutation of `b` onto `a` over the buffer.
pub fn calc_permutation(
    a: &ParamSet,
    b: &ParamSet,
    buffer: &MemoryBuffer,
    batch_size: usize,
) -> Result<Permutation> {
    let stats = collect_activations(a, b, buffer, batch_size)?;
    Ok(permutation_from_stats(&stats)?.0)
}

/// Reorders channels of every permutation group: for each `(tensor, axis)`
/// tied to a group, `out[..., i, ...] = params[..., perm[i], ...]`. This is
/// function-preserving by construction.
pub fn apply_permutation(params: &ParamSet, perm: &Permutation) -> Result<ParamSet> {
    let spec = PermutationSpec::of(params.arch());
    perm.validate(&spec)?;
    let mut out = params.clone();
    for group in &spec.groups {
        let idx = perm
            .get(group.id)
            .expect("validate() guarantees every group");
        for (name, axis) in &group.axes {
            let gathered = out.get(name)?.gather_axis(*axis, idx)?;
            out.set(name, gathered)?;
        }
    }
    Ok(out)
}

/// Elementwise blend `(1 - alpha) * a + alpha * b` over every tensor,
/// running statistics included. The endpoints are exact: `alpha = 0`
/// returns `a` bit for bit and `alpha = 1` returns `b` bit for bit.
pub fn interpolate(a: &ParamSet, b: &ParamSet, alpha: f32) -> Result<ParamSet> {
    if a.arch() != b.arch() {
        return Err(CoreError::InvalidArgument {
            op: "interpolate",
            detail: "networks have different architectures".into(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::InvalidArgument {
            op: "interpolate",
            detail: format!("alpha must be in [0, 1], got {}", alpha),
        });
    }
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let mut out = a.clone();
    let names: Vec<String> = a.names().map(str::to_string).collect();
    for name in names {
        let blended = a.get(&name)?.lerp(b.get(&name)?, alpha)?;
        out.set(&name, blended)?;
    }
    Ok(out)
}

/// Re-estimates batch-norm statistics from scratch on the buffer: running
/// statistics are reset and replaced by the equal-weight average of the
/// batch moments over one full pass (variances enter with the unbiased
/// correction). Architectures without batch norm are returned unchanged.
pub fn update_batchnorm(
    params: &ParamSet,
    buffer: &MemoryBuffer,
    batch_size: usize,
) -> Result<ParamSet> {
    if !params.arch().id.has_batchnorm() {
        return Ok(params.clone());
    }
    let mut out = params.clone();
    // layer -> (sum of batch means, sum of unbiased batch vars, batches)
    let mut acc: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> =
        std::collections::BTreeMap::new();
    for batch in buffer.iterate_all(batch_size)? {
        for stats in collect_batch_stats(params, &batch.x)? {
            let entry = acc.entry(stats.layer.clone()).or_insert_with(|| {
                (vec![0.0; stats.mean.len()], vec![0.0; stats.mean.len()], 0)
            });
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count as f64 - 1.0)
            } else {
                1.0
            };
            for (slot, &m) in entry.0.iter_mut().zip(&stats.mean) {
                *slot += m as f64;
            }
            for (slot, &v) in entry.1.iter_mut().zip(&stats.var) {
                *slot += v as f64 * unbias;
            }
            entry.2 += 1;
        }
    }
    for (layer, (mean_sum, var_sum, batches)) in acc {
        let n = batches as f64;
        let mean: Vec<f32> = mean_sum.iter().map(|&s| (s / n) as f32).collect();
        let var: Vec<f32> = var_sum.iter().map(|&s| (s / n) as f32).collect();
        let c = mean.len();
        out.set(&format!("{}.running_mean", layer), Tensor::from_vec(vec![c], mean)?)?;
        out.set(&format!("{}.running_var", layer), Tensor::from_vec(vec![c], var)?)?;
    }
    Ok(out)
}

/// Finds the producer weight/bias names of a group (the tensors whose
/// output axis the group permutes).
fn producer_of(group: &PermGroup) -> Result<(String, Option<String>)> {
    let weight = group
        .axes
        .iter()
        .find(|(n, ax)| *ax == 0 && n.ends_with(".weight"))
        .map(|(n, _)| n.clone())
        .ok_or_else(|| CoreError::InvalidArgument {
            op: "repair_affine",
            detail: format!("group {} has no producer weight", group.id),
        })?;
    let bias = group
        .axes
        .iter()
        .find(|(n, ax)| *ax == 0 && n.ends_with(".bias"))
        .map(|(n, _)| n.clone());
    Ok((weight, bias))
}

/// Variance-collapse repair for normalization-free networks.
///
/// `stats` must come from [`collect_activations`] on the two interpolation
/// endpoints in the merged network's channel order — i.e. on
/// `(theta, aligned_prev)` after the permutation was applied. For each
/// group, in depth order, the merged network's pre-activation moments are
/// measured on the buffer and the producer layer is rescaled per channel
/// (`w *= s`, `b = s * b + t`) so mean and variance land on the convex
/// combination of the endpoints' moments at the same `alpha` used for the
/// weight blend. Degenerate target or measured variances fall back to a
/// pure mean shift.
pub fn repair_affine(
    merged: &ParamSet,
    stats: &ActivationStats,
    alpha: f32,
    buffer: &MemoryBuffer,
    batch_size: usize,
) -> Result<ParamSet> {
    if merged.arch().id.has_batchnorm() {
        return Err(CoreError::InvalidArgument {
            op: "repair_affine",
            detail: "normalized architectures repair via update_batchnorm".into(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::InvalidArgument {
            op: "repair_affine",
            detail: format!("alpha must be in [0, 1], got {}", alpha),
        });
    }
    let spec = PermutationSpec::of(merged.arch());
    if stats.groups.len() != spec.groups.len()
        || stats
            .groups
            .iter()
            .zip(&spec.groups)
            .any(|(s, g)| s.group != g.id || s.size != g.size)
    {
        return Err(CoreError::InvalidArgument {
            op: "repair_affine",
            detail: "activation statistics do not match the model's permutation groups".into(),
        });
    }
    let a = alpha as f64;
    let mut out = merged.clone();
    for (g, gstats) in spec.groups.iter().zip(&stats.groups) {
        // Convex-combination targets from the endpoints' moments.
        let t_mean: Vec<f64> = gstats
            .pre_mean_a
            .iter()
            .zip(&gstats.pre_mean_b)
            .map(|(&ma, &mb)| (1.0 - a) * ma + a * mb)
            .collect();
        let t_var: Vec<f64> = gstats
            .pre_var_a
            .iter()
            .zip(&gstats.pre_var_b)
            .map(|(&va, &vb)| (1.0 - a) * va + a * vb)
            .collect();

        // Measure the current model at this group's hook (upstream groups
        // are already repaired, so this sees their corrected output).
        let mut acc = MomentAcc::new(g.size);
        let mut n = 0.0f64;
        for batch in buffer.iterate_all(batch_size)? {
            let (_, hooks) = forward_eval_hooked(&out, &batch.x)?;
            let (_, pre, _) = hooks
                .iter()
                .find(|(id, _, _)| *id == g.id)
                .expect("every group has a hook site");
            let vals = per_channel_values(pre)?;
            n += vals[0].len() as f64;
            acc.add(&vals);
        }
        let (m_mean, m_var) = acc.finalize(n);

        let (w_name, b_name) = producer_of(g)?;
        let mut w = out.get(&w_name)?.clone();
        let cols: usize = w.shape()[1..].iter().product();
        let mut b = match &b_name {
            Some(name) => Some(out.get(name)?.clone()),
            None => None,
        };
        for i in 0..g.size {
            let scale = if t_var[i] > VAR_FLOOR && m_var[i] > VAR_FLOOR {
                (t_var[i] / m_var[i]).sqrt()
            } else {
                1.0
            };
            let shift = t_mean[i] - scale * m_mean[i];
            let row = &mut w.data_mut()[i * cols..(i + 1) * cols];
            for v in row {
                *v = (*v as f64 * scale) as f32;
            }
            if let Some(bias) = &mut b {
                let bd = bias.data_mut();
                bd[i] = (bd[i] as f64 * scale + shift) as f32;
            }
        }
        out.set(&w_name, w)?;
        if let (Some(name), Some(bias)) = (b_name, b) {
            out.set(&name, bias)?;
        }
    }
    Ok(out)
}

/// Result of one post-task merge.
#[derive(Debug, Clone)]
pub struct InterpolationOutcome {
    pub merged: ParamSet,
    pub permutation: Permutation,
    /// Per group: mean correlation of the matched channel pairs.
    pub matched_corr: Vec<(usize, f64)>,
}

/// The full post-task merge: match `theta_prev` onto `theta` over the
/// buffer, align, interpolate at `alpha`, and repair statistics (batch-norm
/// re-estimation, or affine repair for norm-free networks).
pub fn clewi_task_step(
    theta: &ParamSet,
    theta_prev: &ParamSet,
    buffer: &MemoryBuffer,
    alpha: f32,
    batch_size: usize,
) -> Result<InterpolationOutcome> {
    let stats = collect_activations(theta, theta_prev, buffer, batch_size)?;
    let (permutation, matched_corr) = permutation_from_stats(&stats)?;
    let aligned_prev = apply_permutation(theta_prev, &permutation)?;
    let merged = interpolate(theta, &aligned_prev, alpha)?;
    let merged = if theta.arch().id.has_batchnorm() {
        update_batchnorm(&merged, buffer, batch_size)?
    } else {
        let aligned_stats = collect_activations(theta, &aligned_prev, buffer, batch_size)?;
        repair_affine(&merged, &aligned_stats, alpha, buffer, batch_size)?
    };
    Ok(InterpolationOutcome {
        merged,
        permutation,
        matched_corr,
    })
}
