//! Model zoo with named parameters.
//!
//! Three desk-scale architectures share one execution path:
//!
//! * `small-mlp` — `fc1 -> relu -> fc2 -> relu -> head`, hidden width `32·w`;
//! * `small-convnet` — three conv+norm+relu stages (`8w, 16w, 16w` channels)
//!   with 2x2 average pooling after the first two, global average pooling,
//!   then a linear head;
//! * `small-resnet` — a conv+norm stem (`8w` channels) and two
//!   identity-shortcut residual blocks, global average pooling, linear head.
//!
//! Convolutions that feed a batch norm carry no bias (the norm shift makes
//! it redundant). Parameters live in a [`ParamSet`] keyed by dotted names
//! (`fc1.weight`, `b1.bn2.gamma`, ...); batch-norm running statistics are
//! part of the set but are not trainable.

pub mod checkpoint;
mod graph;
pub mod perm;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use perm::{PermGroup, Permutation, PermutationSpec};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

/// Batch-norm epsilon, matching the common framework default.
pub const BN_EPS: f32 = 1e-5;
/// Batch-norm running-statistics momentum, matching the common default.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchId {
    SmallMlp,
    SmallConvnet,
    SmallResnet,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::SmallMlp => "small-mlp",
            ArchId::SmallConvnet => "small-convnet",
            ArchId::SmallResnet => "small-resnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small-mlp" => Ok(ArchId::SmallMlp),
            "small-convnet" => Ok(ArchId::SmallConvnet),
            "small-resnet" => Ok(ArchId::SmallResnet),
            other => Err(CoreError::InvalidArgument {
                op: "ArchId::parse",
                detail: format!(
                    "unknown architecture '{}' (expected small-mlp, small-convnet or small-resnet)",
                    other
                ),
            }),
        }
    }

    /// Whether the architecture contains batch-norm layers.
    pub fn has_batchnorm(&self) -> bool {
        !matches!(self, ArchId::SmallMlp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    pub id: ArchId,
    /// Width multiplier; channel/hidden counts scale linearly with it.
    pub width: usize,
    pub num_classes: usize,
    /// Per-sample input shape: `[D]` for the MLP, `[C, H, W]` for conv nets.
    pub input_shape: Vec<usize>,
}

impl ModelArch {
    pub fn new(id: ArchId, width: usize, num_classes: usize, input_shape: Vec<usize>) -> Result<Self> {
        if width == 0 || num_classes == 0 {
            return Err(CoreError::InvalidArgument {
                op: "ModelArch::new",
                detail: "width and num_classes must be positive".into(),
            });
        }
        let rank_ok = match id {
            ArchId::SmallMlp => input_shape.len() == 1,
            ArchId::SmallConvnet | ArchId::SmallResnet => input_shape.len() == 3,
        };
        if !rank_ok || input_shape.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidArgument {
                op: "ModelArch::new",
                detail: format!(
                    "input shape {:?} invalid for {} (MLP wants [D], conv nets want [C,H,W])",
                    input_shape,
                    id.as_str()
                ),
            });
        }
        Ok(Self {
            id,
            width,
            num_classes,
            input_shape,
        })
    }

    /// Hidden width of the MLP.
    pub fn mlp_hidden(&self) -> usize {
        32 * self.width
    }

    /// Channel counts of the three convnet stages.
    pub fn convnet_channels(&self) -> [usize; 3] {
        [8 * self.width, 16 * self.width, 16 * self.width]
    }

    /// Channel count of the resnet trunk.
    pub fn resnet_channels(&self) -> usize {
        8 * self.width
    }

    /// Ordered `(name, shape)` list of every tensor in the parameter set,
    /// in layer order. This is the single source of truth for what a model
    /// of this architecture contains.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.num_classes;
        let mut out = Vec::new();
        let lin = |out: &mut Vec<(String, Vec<usize>)>, name: &str, o: usize, i: usize| {
            out.push((format!("{}.weight", name), vec![o, i]));
            out.push((format!("{}.bias", name), vec![o]));
        };
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, o: usize, i: usize| {
            out.push((format!("{}.weight", name), vec![o, i, 3, 3]));
        };
        let bn = |out: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize| {
            out.push((format!("{}.gamma", name), vec![c]));
            out.push((format!("{}.beta", name), vec![c]));
            out.push((format!("{}.running_mean", name), vec![c]));
            out.push((format!("{}.running_var", name), vec![c]));
        };
        match self.id {
            ArchId::SmallMlp => {
                let d = self.input_shape[0];
                let h = self.mlp_hidden();
                lin(&mut out, "fc1", h, d);
                lin(&mut out, "fc2", h, h);
                lin(&mut out, "head", k, h);
            }
            ArchId::SmallConvnet => {
                let cin = self.input_shape[0];
                let [c1, c2, c3] = self.convnet_channels();
                conv(&mut out, "conv1", c1, cin);
                bn(&mut out, "bn1", c1);
                conv(&mut out, "conv2", c2, c1);
                bn(&mut out, "bn2", c2);
                conv(&mut out, "conv3", c3, c2);
                bn(&mut out, "bn3", c3);
                lin(&mut out, "head", k, c3);
            }
            ArchId::SmallResnet => {
                let cin = self.input_shape[0];
                let c = self.resnet_channels();
                conv(&mut out, "stem", c, cin);
                bn(&mut out, "stem_bn", c);
                for blk in ["b1", "b2"] {
                    conv(&mut out, &format!("{}.conv1", blk), c, c);
                    bn(&mut out, &format!("{}.bn1", blk), c);
                    conv(&mut out, &format!("{}.conv2", blk), c, c);
                    bn(&mut out, &format!("{}.bn2", blk), c);
                }
                lin(&mut out, "head", k, c);
            }
        }
        out
    }
}

/// Named parameter collection for one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    arch: ModelArch,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub(crate) fn from_parts(arch: ModelArch, tensors: BTreeMap<String, Tensor>) -> Self {
        Self { arch, tensors }
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| CoreError::InvalidArgument {
            op: "ParamSet::get",
            detail: format!("no parameter named '{}'", name),
        })
    }

    /// Internal accessor for names guaranteed by the layout.
    pub(crate) fn p(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{}' missing from layout", name))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(CoreError::ShapeMismatch {
                        op: "ParamSet::set",
                        detail: format!(
                            "'{}' has shape {:?}, new value {:?}",
                            name,
                            slot.shape(),
                            value.shape()
                        ),
                    });
                }
                *slot = value;
                Ok(())
            }
            None => Err(CoreError::InvalidArgument {
                op: "ParamSet::set",
                detail: format!("no parameter named '{}'", name),
            }),
        }
    }

    /// All tensor names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Names of trainable tensors (running statistics excluded).
    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| Self::is_trainable(n))
    }

    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(".running_mean") && !name.ends_with(".running_var")
    }

    pub fn is_all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_all_finite())
    }
}

/// Fresh model with Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero
/// biases, unit batch-norm scale and zero shift, and identity running
/// statistics. Draws happen in layer order from a seeded generator, so the
/// same seed always yields the same model.
pub fn build_model(arch: &ModelArch, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in arch.param_layout() {
        let t = if name.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f32).sqrt();
            Tensor::randn(&shape, std, &mut rng)
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            Tensor::full(&shape, 1.0)
        } else {
            // biases, beta, running_mean
            Tensor::zeros(&shape)
        };
        tensors.insert(name, t);
    }
    ParamSet { arch: arch.clone(), tensors }
}

/// Number of trainable scalars in the model.
pub fn param_count(params: &ParamSet) -> usize {
    params
        .iter()
        .filter(|(n, _)| ParamSet::is_trainable(n))
        .map(|(_, t)| t.numel())
        .sum()
}

/// Logits in inference mode (batch norm uses running statistics).
pub fn forward_eval(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    graph::eval(params, x, None)
}

/// Inference-mode logits plus per-group activations at the permutation
/// hook sites. Each entry is `(group id, pre-activation, post-activation)`
/// where the pre-activation is the producer output before the nonlinearity.
pub fn forward_eval_hooked(
    params: &ParamSet,
    x: &Tensor,
) -> Result<(Tensor, Vec<(usize, Tensor, Tensor)>)> {
    let mut hooks = Vec::new();
    let logits = graph::eval(params, x, Some(&mut hooks))?;
    Ok((logits, hooks))
}

/// Per-layer batch moments from one statistics-collection forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub layer: String,
    pub mean: Vec<f32>,
    /// Biased (population) batch variance.
    pub var: Vec<f32>,
    /// Per-channel element count of the batch.
    pub count: usize,
}

/// Forward pass that normalizes every batch-norm layer with the batch's own
/// statistics and reports those statistics, leaving `params` untouched.
/// This is the collection primitive behind batch-norm re-estimation after
/// weight-space surgery.
pub fn collect_batch_stats(params: &ParamSet, x: &Tensor) -> Result<Vec<BnBatchStats>> {
    Ok(graph::collect_stats(params, x)?
        .into_iter()
        .map(|(layer, mean, var, count)| BnBatchStats {
            layer,
            mean,
            var,
            count,
        })
        .collect())
}

/// Training-mode forward on a gradient tape. Registers every trainable
/// tensor as a named tape parameter, normalizes with batch statistics, and
/// updates the running statistics in `params` as a side effect. Returns the
/// logits node.
pub fn forward_train(params: &mut ParamSet, x: &Tensor, tape: &mut GradTape) -> Result<NodeId> {
    graph::train(params, x, tape)
}

/// Trainable `(name, shape)` table for the 18-layer residual reference
/// network (3x3 stem, four stages of two basic blocks at 64/128/256/512
/// channels, 1x1 projection shortcuts on stage transitions, linear head).
/// The lab never instantiates this network; the table exists for parameter
/// and memory accounting.
pub fn resnet18_reference_layout(num_classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let bn = |out: &mut Vec<(String, Vec<usize>)>, name: String, c: usize| {
        out.push((format!("{}.gamma", name), vec![c]));
        out.push((format!("{}.beta", name), vec![c]));
    };
    out.push(("conv1.weight".into(), vec![64, 3, 3, 3]));
    bn(&mut out, "bn1".into(), 64);
    let mut cin = 64usize;
    for (stage, planes) in [64usize, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let name = format!("layer{}.{}", stage + 1, block);
            out.push((format!("{}.conv1.weight", name), vec![planes, cin, 3, 3]));
            bn(&mut out, format!("{}.bn1", name), planes);
            out.push((format!("{}.conv2.weight", name), vec![planes, planes, 3, 3]));
            bn(&mut out, format!("{}.bn2", name), planes);
            if cin != planes {
                out.push((format!("{}.shortcut.conv.weight", name), vec![planes, cin, 1, 1]));
                bn(&mut out, format!("{}.shortcut.bn", name), planes);
            }
            cin = planes;
        }
    }
    out.push(("fc.weight".into(), vec![num_classes, 512]));
    out.push(("fc.bias".into(), vec![num_classes]));
    out
}

/// Trainable parameter count of the 18-layer residual reference network.
pub fn resnet18_reference_param_count(num_classes: usize) -> usize {
    resnet18_reference_layout(num_classes)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// How many raw 8-bit images of the given shape fit in the memory that the
/// model's f32 parameters occupy: `floor(params * 4 / (c*h*w))`.
pub fn equivalent_images(param_count: usize, image_shape: (usize, usize, usize)) -> usize {
    let (c, h, w) = image_shape;
    let image_bytes = c * h * w;
    if image_bytes == 0 {
        return 0;
    }
    param_count * 4 / image_bytes
}
