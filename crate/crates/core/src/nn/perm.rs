//! Permutation symmetry of the zoo architectures.
//!
//! Reordering a layer's output channels leaves the network function
//! unchanged if every tensor axis tied to those channels is reordered with
//! the same index array: the producer's output axis (weight axis 0, bias,
//! batch-norm vectors) and every consumer's input axis (weight axis 1). A
//! [`PermGroup`] lists those `(tensor, axis)` pairs; skip connections tie
//! the stem and both residual blocks' second convs into a single group
//! because the elementwise add forces them to share channel order.
//!
//! Convention: a permutation is a gather array, `permuted[i] =
//! original[p[i]]` along the tied axis.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::nn::{ArchId, ModelArch};

#[derive(Debug, Clone)]
pub struct PermGroup {
    pub id: usize,
    /// Channel count of the group.
    pub size: usize,
    /// Every `(tensor name, axis)` reordered by this group's index array.
    pub axes: Vec<(String, usize)>,
}

#[derive(Debug, Clone)]
pub struct PermutationSpec {
    pub groups: Vec<PermGroup>,
}

impl PermutationSpec {
    /// Permutation groups of an architecture, in depth order.
    pub fn of(arch: &ModelArch) -> Self {
        let bn_axes = |name: &str| -> Vec<(String, usize)> {
            ["gamma", "beta", "running_mean", "running_var"]
                .iter()
                .map(|part| (format!("{}.{}", name, part), 0))
                .collect()
        };
        let groups = match arch.id {
            ArchId::SmallMlp => {
                let h = arch.mlp_hidden();
                vec![
                    PermGroup {
                        id: 0,
                        size: h,
                        axes: vec![
                            ("fc1.weight".into(), 0),
                            ("fc1.bias".into(), 0),
                            ("fc2.weight".into(), 1),
                        ],
                    },
                    PermGroup {
                        id: 1,
                        size: h,
                        axes: vec![
                            ("fc2.weight".into(), 0),
                            ("fc2.bias".into(), 0),
                            ("head.weight".into(), 1),
                        ],
                    },
                ]
            }
            ArchId::SmallConvnet => {
                let [c1, c2, c3] = arch.convnet_channels();
                let mut g0 = vec![("conv1.weight".into(), 0)];
                g0.extend(bn_axes("bn1"));
                g0.push(("conv2.weight".into(), 1));
                let mut g1 = vec![("conv2.weight".into(), 0)];
                g1.extend(bn_axes("bn2"));
                g1.push(("conv3.weight".into(), 1));
                let mut g2 = vec![("conv3.weight".into(), 0)];
                g2.extend(bn_axes("bn3"));
                g2.push(("head.weight".into(), 1));
                vec![
                    PermGroup { id: 0, size: c1, axes: g0 },
                    PermGroup { id: 1, size: c2, axes: g1 },
                    PermGroup { id: 2, size: c3, axes: g2 },
                ]
            }
            ArchId::SmallResnet => {
                let c = arch.resnet_channels();
                // The skip bus: stem output, both blocks' second conv
                // outputs, and everything reading from the trunk.
                let mut bus = vec![("stem.weight".into(), 0)];
                bus.extend(bn_axes("stem_bn"));
                for blk in ["b1", "b2"] {
                    bus.push((format!("{}.conv2.weight", blk), 0));
                    bus.extend(bn_axes(&format!("{}.bn2", blk)));
                }
                bus.push(("b1.conv1.weight".into(), 1));
                bus.push(("b2.conv1.weight".into(), 1));
                bus.push(("head.weight".into(), 1));
                let inner = |blk: &str| -> Vec<(String, usize)> {
                    let mut v = vec![(format!("{}.conv1.weight", blk), 0)];
                    v.extend(bn_axes(&format!("{}.bn1", blk)));
                    v.push((format!("{}.conv2.weight", blk), 1));
                    v
                };
                vec![
                    PermGroup { id: 0, size: c, axes: bus },
                    PermGroup { id: 1, size: c, axes: inner("b1") },
                    PermGroup { id: 2, size: c, axes: inner("b2") },
                ]
            }
        };
        Self { groups }
    }

    pub fn group(&self, id: usize) -> Option<&PermGroup> {
        self.groups.iter().find(|g| g.id == id)
    }
}

/// One gather array per permutation group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    maps: BTreeMap<usize, Vec<usize>>,
}

impl Permutation {
    pub fn identity(spec: &PermutationSpec) -> Self {
        let maps = spec
            .groups
            .iter()
            .map(|g| (g.id, (0..g.size).collect()))
            .collect();
        Self { maps }
    }

    /// Uniformly random permutation per group.
    pub fn random<R: Rng>(spec: &PermutationSpec, rng: &mut R) -> Self {
        let maps = spec
            .groups
            .iter()
            .map(|g| {
                let mut p: Vec<usize> = (0..g.size).collect();
                p.shuffle(rng);
                (g.id, p)
            })
            .collect();
        Self { maps }
    }

    /// Builds from explicit per-group gather arrays.
    pub fn from_maps(maps: BTreeMap<usize, Vec<usize>>) -> Self {
        Self { maps }
    }

    pub fn get(&self, group: usize) -> Option<&[usize]> {
        self.maps.get(&group).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.maps.iter().map(|(&g, v)| (g, v.as_slice()))
    }

    /// Checks the permutation covers every group of `spec` with a bijection
    /// of the right size.
    pub fn validate(&self, spec: &PermutationSpec) -> Result<()> {
        for g in &spec.groups {
            let p = self.maps.get(&g.id).ok_or_else(|| {
                CoreError::InvalidPermutation(format!("group {} has no index array", g.id))
            })?;
            if p.len() != g.size {
                return Err(CoreError::InvalidPermutation(format!(
                    "group {} has {} indices, expected {}",
                    g.id,
                    p.len(),
                    g.size
                )));
            }
            let mut seen = vec![false; g.size];
            for &i in p {
                if i >= g.size || seen[i] {
                    return Err(CoreError::InvalidPermutation(format!(
                        "group {} index array is not a bijection",
                        g.id
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// Inverse gather arrays: if `self` maps slot `i` to source `p[i]`,
    /// the inverse maps slot `p[i]` back to source `i`.
    pub fn inverse(&self) -> Self {
        let maps = self
            .maps
            .iter()
            .map(|(&g, p)| {
                let mut inv = vec![0usize; p.len()];
                for (i, &j) in p.iter().enumerate() {
                    inv[j] = i;
                }
                (g, inv)
            })
            .collect();
        Self { maps }
    }

    /// True when every group's array is the identity.
    pub fn is_identity(&self) -> bool {
        self.maps
            .values()
            .all(|p| p.iter().enumerate().all(|(i, &j)| i == j))
    }
}
