//! Dense row-major f32 tensors.
//!
//! Parameters and activations are stored as flat `Vec<f32>` plus a shape.
//! All reductions inside the numeric kernels accumulate in f64 so results
//! are stable enough for the finite-difference gradient checks and exact
//! enough that reordering a channel axis does not visibly move logits.

pub mod kernels;
pub mod tape;

use crate::error::{CoreError, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from a flat buffer, checking the element count.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "from_vec",
                detail: format!(
                    "shape {:?} wants {} elements, buffer holds {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (z as f32) * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Single element of a rank-0 or single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1, "item() on a multi-element tensor");
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Copies row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> Result<Vec<f32>> {
        if self.shape.len() != 2 || i >= self.shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "row",
                detail: format!("row {} of shape {:?}", i, self.shape),
            });
        }
        let w = self.shape[1];
        Ok(self.data[i * w..(i + 1) * w].to_vec())
    }

    /// Stacks equally shaped tensors along a fresh leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| CoreError::InvalidArgument {
            op: "stack",
            detail: "empty input list".into(),
        })?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(CoreError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", first.shape, t.shape),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Gathers index slices along `axis`: `out[..., i, ...] = self[..., idx[i], ...]`.
    ///
    /// This is the primitive behind weight permutation. `idx` must index
    /// within the axis but is not required to be a bijection here; the
    /// permutation layer validates bijectivity separately.
    pub fn gather_axis(&self, axis: usize, idx: &[usize]) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(CoreError::InvalidArgument {
                op: "gather_axis",
                detail: format!("axis {} of rank-{} tensor", axis, self.shape.len()),
            });
        }
        let axis_len = self.shape[axis];
        if let Some(&bad) = idx.iter().find(|&&j| j >= axis_len) {
            return Err(CoreError::InvalidArgument {
                op: "gather_axis",
                detail: format!("index {} out of bounds for axis length {}", bad, axis_len),
            });
        }
        // outer = product of dims before the axis, inner = product after.
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = idx.len();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &j in idx {
                let start = (o * axis_len + j) * inner;
                out.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Elementwise `(1 - t) * self + t * other`, used by weight interpolation.
    pub fn lerp(&self, other: &Tensor, t: f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                op: "lerp",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let a = 1.0 - t;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + t * y)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }
}
