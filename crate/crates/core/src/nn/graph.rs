//! Single source of truth for the zoo's computation graphs.
//!
//! Each architecture's graph is written once against the [`Backend`] trait
//! and executed in three modes: on the gradient tape (training), directly
//! on tensors with running statistics (inference), and directly on tensors
//! with batch statistics (statistics collection). This guarantees the
//! differentiated graph and the inference graph can never drift apart.
//!
//! `hook` callbacks fire at the permutation-group sites with the producer's
//! pre-activation and post-activation output; only the inference backend
//! records them. For the residual net the skip-connected bus is observed at
//! its last producer, the output of the second block's add + relu.

use crate::error::{CoreError, Result};
use crate::nn::{ModelArch, ParamSet, BN_EPS, BN_MOMENTUM};
use crate::tensor::kernels;
use crate::tensor::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

trait Backend {
    type V: Clone;
    fn input(&mut self, x: &Tensor) -> Self::V;
    fn linear(&mut self, ps: &ParamSet, layer: &str, x: &Self::V) -> Result<Self::V>;
    fn conv2d(&mut self, ps: &ParamSet, layer: &str, x: &Self::V) -> Result<Self::V>;
    fn batchnorm(&mut self, ps: &ParamSet, layer: &str, x: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn avgpool2d(&mut self, x: &Self::V, k: usize) -> Result<Self::V>;
    fn global_avgpool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn hook(&mut self, _group: usize, _pre: &Self::V, _post: &Self::V) {}
}

fn run_graph<B: Backend>(ps: &ParamSet, x: &Tensor, be: &mut B) -> Result<B::V> {
    let x0 = be.input(x);
    match ps.arch().id {
        crate::nn::ArchId::SmallMlp => {
            let h1p = be.linear(ps, "fc1", &x0)?;
            let h1 = be.relu(&h1p)?;
            be.hook(0, &h1p, &h1);
            let h2p = be.linear(ps, "fc2", &h1)?;
            let h2 = be.relu(&h2p)?;
            be.hook(1, &h2p, &h2);
            be.linear(ps, "head", &h2)
        }
        crate::nn::ArchId::SmallConvnet => {
            let c1 = be.conv2d(ps, "conv1", &x0)?;
            let n1 = be.batchnorm(ps, "bn1", &c1)?;
            let r1 = be.relu(&n1)?;
            be.hook(0, &n1, &r1);
            let p1 = be.avgpool2d(&r1, 2)?;
            let c2 = be.conv2d(ps, "conv2", &p1)?;
            let n2 = be.batchnorm(ps, "bn2", &c2)?;
            let r2 = be.relu(&n2)?;
            be.hook(1, &n2, &r2);
            let p2 = be.avgpool2d(&r2, 2)?;
            let c3 = be.conv2d(ps, "conv3", &p2)?;
            let n3 = be.batchnorm(ps, "bn3", &c3)?;
            let r3 = be.relu(&n3)?;
            be.hook(2, &n3, &r3);
            let g = be.global_avgpool(&r3)?;
            be.linear(ps, "head", &g)
        }
        crate::nn::ArchId::SmallResnet => {
            let s = be.conv2d(ps, "stem", &x0)?;
            let sn = be.batchnorm(ps, "stem_bn", &s)?;
            let mut trunk = be.relu(&sn)?;
            let mut bus_pre = sn;
            for (idx, blk) in ["b1", "b2"].into_iter().enumerate() {
                let c1 = be.conv2d(ps, &format!("{}.conv1", blk), &trunk)?;
                let n1 = be.batchnorm(ps, &format!("{}.bn1", blk), &c1)?;
                let r1 = be.relu(&n1)?;
                be.hook(idx + 1, &n1, &r1);
                let c2 = be.conv2d(ps, &format!("{}.conv2", blk), &r1)?;
                let n2 = be.batchnorm(ps, &format!("{}.bn2", blk), &c2)?;
                let sum = be.add(&n2, &trunk)?;
                trunk = be.relu(&sum)?;
                bus_pre = sum;
            }
            be.hook(0, &bus_pre, &trunk);
            let g = be.global_avgpool(&trunk)?;
            be.linear(ps, "head", &g)
        }
    }
}

/// Reshapes a batch to the layout the architecture expects, accepting any
/// batch whose per-sample element count matches (vector datasets can feed
/// image models and vice versa).
fn prepare_input(arch: &ModelArch, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.is_empty() {
        return Err(CoreError::ShapeMismatch {
            op: "forward",
            detail: "input must have a leading batch axis".into(),
        });
    }
    let n = s[0];
    let per_sample: usize = s[1..].iter().product();
    let want: usize = arch.input_shape.iter().product();
    if per_sample != want {
        return Err(CoreError::ShapeMismatch {
            op: "forward",
            detail: format!(
                "batch {:?} has {} elements per sample, model expects {:?}",
                s, per_sample, arch.input_shape
            ),
        });
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&arch.input_shape);
    x.reshaped(&shape)
}

/// Deferred running-statistics update: `(bn layer, batch mean, biased batch
/// variance, per-channel element count)`.
type StatUpdate = (String, Vec<f32>, Vec<f32>, usize);

/// Exponential-moving-average update of the stored running statistics.
/// The variance enters with the unbiased (`m / (m - 1)`) correction, the
/// normalization itself always uses the biased batch variance.
fn apply_stat_updates(ps: &mut ParamSet, updates: Vec<StatUpdate>) -> Result<()> {
    for (layer, mean, var, m) in updates {
        let unbias = if m > 1 {
            m as f32 / (m as f32 - 1.0)
        } else {
            1.0
        };
        let rm_name = format!("{}.running_mean", layer);
        let rv_name = format!("{}.running_var", layer);
        let mut rm = ps.get(&rm_name)?.clone();
        let mut rv = ps.get(&rv_name)?.clone();
        for (slot, &b) in rm.data_mut().iter_mut().zip(&mean) {
            *slot = (1.0 - BN_MOMENTUM) * *slot + BN_MOMENTUM * b;
        }
        for (slot, &b) in rv.data_mut().iter_mut().zip(&var) {
            *slot = (1.0 - BN_MOMENTUM) * *slot + BN_MOMENTUM * (b * unbias);
        }
        ps.set(&rm_name, rm)?;
        ps.set(&rv_name, rv)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference backend: plain tensors, running statistics, optional hooks.

struct EvalBackend<'a> {
    hooks: Option<&'a mut Vec<(usize, Tensor, Tensor)>>,
}

impl Backend for EvalBackend<'_> {
    type V = Tensor;

    fn input(&mut self, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn linear(&mut self, ps: &ParamSet, layer: &str, x: &Tensor) -> Result<Tensor> {
        kernels::linear(
            x,
            ps.p(&format!("{}.weight", layer)),
            ps.p(&format!("{}.bias", layer)),
        )
    }

    fn conv2d(&mut self, ps: &ParamSet, layer: &str, x: &Tensor) -> Result<Tensor> {
        kernels::conv2d(x, ps.p(&format!("{}.weight", layer)), None, 1, 1)
    }

    fn batchnorm(&mut self, ps: &ParamSet, layer: &str, x: &Tensor) -> Result<Tensor> {
        let rm = ps.p(&format!("{}.running_mean", layer));
        let rv = ps.p(&format!("{}.running_var", layer));
        let inv_std: Vec<f32> = rv.data().iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        kernels::bn_apply(
            x,
            rm.data(),
            &inv_std,
            ps.p(&format!("{}.gamma", layer)),
            ps.p(&format!("{}.beta", layer)),
        )
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::relu(x))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::add(a, b)
    }

    fn avgpool2d(&mut self, x: &Tensor, k: usize) -> Result<Tensor> {
        kernels::avgpool2d(x, k)
    }

    fn global_avgpool(&mut self, x: &Tensor) -> Result<Tensor> {
        kernels::global_avgpool(x)
    }

    fn hook(&mut self, group: usize, pre: &Tensor, post: &Tensor) {
        if let Some(out) = self.hooks.as_deref_mut() {
            out.push((group, pre.clone(), post.clone()));
        }
    }
}

pub(crate) fn eval(
    ps: &ParamSet,
    x: &Tensor,
    hooks: Option<&mut Vec<(usize, Tensor, Tensor)>>,
) -> Result<Tensor> {
    let x = prepare_input(ps.arch(), x)?;
    let mut be = EvalBackend { hooks };
    run_graph(ps, &x, &mut be)
}

// ---------------------------------------------------------------------------
// Collection backend: batch statistics, records running-stat updates.

struct CollectBackend {
    updates: Vec<StatUpdate>,
}

impl Backend for CollectBackend {
    type V = Tensor;

    fn input(&mut self, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn linear(&mut self, ps: &ParamSet, layer: &str, x: &Tensor) -> Result<Tensor> {
        kernels::linear(
            x,
            ps.p(&format!("{}.weight", layer)),
            ps.p(&format!("{}.bias", layer)),
        )
    }

    fn conv2d(&mut self, ps: &ParamSet, layer: &str, x: &Tensor) -> Result<Tensor> {
        kernels::conv2d(x, ps.p(&format!("{}.weight", layer)), None, 1, 1)
    }

    fn batchnorm(&mut self, ps: &ParamSet, layer: &str, x: &Tensor) -> Result<Tensor> {
        let (mean, var) = kernels::channel_moments(x)?;
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let y = kernels::bn_apply(
            x,
            &mean,
            &inv_std,
            ps.p(&format!("{}.gamma", layer)),
            ps.p(&format!("{}.beta", layer)),
        )?;
        let m = kernels::channel_reduce_count(x.shape())?;
        self.updates.push((layer.to_string(), mean, var, m));
        Ok(y)
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::relu(x))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::add(a, b)
    }

    fn avgpool2d(&mut self, x: &Tensor, k: usize) -> Result<Tensor> {
        kernels::avgpool2d(x, k)
    }

    fn global_avgpool(&mut self, x: &Tensor) -> Result<Tensor> {
        kernels::global_avgpool(x)
    }
}

/// Runs the graph with batch-statistics normalization and returns the
/// per-layer batch moments without touching the stored running statistics.
pub(crate) fn collect_stats(ps: &ParamSet, x: &Tensor) -> Result<Vec<StatUpdate>> {
    let x = prepare_input(ps.arch(), x)?;
    let mut be = CollectBackend { updates: Vec::new() };
    run_graph(ps, &x, &mut be)?;
    Ok(be.updates)
}

// ---------------------------------------------------------------------------
// Tape backend: records the graph for backward, batch statistics, and
// running-stat updates.

struct TapeBackend<'a> {
    tape: &'a mut GradTape,
    updates: Vec<StatUpdate>,
}

impl TapeBackend<'_> {
    fn reg(&mut self, ps: &ParamSet, name: &str) -> NodeId {
        self.tape.param(name, ps.p(name))
    }
}

impl Backend for TapeBackend<'_> {
    type V = NodeId;

    fn input(&mut self, x: &Tensor) -> NodeId {
        self.tape.constant(x.clone())
    }

    fn linear(&mut self, ps: &ParamSet, layer: &str, x: &NodeId) -> Result<NodeId> {
        let w = self.reg(ps, &format!("{}.weight", layer));
        let b = self.reg(ps, &format!("{}.bias", layer));
        self.tape.linear(*x, w, b)
    }

    fn conv2d(&mut self, ps: &ParamSet, layer: &str, x: &NodeId) -> Result<NodeId> {
        let w = self.reg(ps, &format!("{}.weight", layer));
        self.tape.conv2d(*x, w, 1, 1)
    }

    fn batchnorm(&mut self, ps: &ParamSet, layer: &str, x: &NodeId) -> Result<NodeId> {
        let gamma = self.reg(ps, &format!("{}.gamma", layer));
        let beta = self.reg(ps, &format!("{}.beta", layer));
        let m = kernels::channel_reduce_count(self.tape.value(*x).shape())?;
        let (y, mean, var) = self.tape.batchnorm(*x, gamma, beta, BN_EPS)?;
        self.updates.push((layer.to_string(), mean, var, m));
        Ok(y)
    }

    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        Ok(self.tape.relu(*x))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.tape.add(*a, *b)
    }

    fn avgpool2d(&mut self, x: &NodeId, k: usize) -> Result<NodeId> {
        self.tape.avgpool2d(*x, k)
    }

    fn global_avgpool(&mut self, x: &NodeId) -> Result<NodeId> {
        self.tape.global_avgpool(*x)
    }
}

pub(crate) fn train(ps: &mut ParamSet, x: &Tensor, tape: &mut GradTape) -> Result<NodeId> {
    let x = prepare_input(ps.arch(), x)?;
    let mut be = TapeBackend {
        tape,
        updates: Vec::new(),
    };
    let y = run_graph(ps, &x, &mut be)?;
    let updates = be.updates;
    apply_stat_updates(ps, updates)?;
    Ok(y)
}
