//! Core library of a continual-learning laboratory.
//!
//! The crate provides everything the experiment CLI needs to study
//! rehearsal-based continual learning with post-task weight interpolation:
//!
//! * [`tensor`] — dense f32 tensors, pure forward kernels, and a
//!   reverse-mode gradient tape over a fixed primitive set.
//! * [`nn`] — a small model zoo (MLP / ConvNet / residual ConvNet) with
//!   named parameters, permutation-symmetry descriptions, and a binary
//!   checkpoint format.
//! * [`data`] — synthetic Gaussian-blob benchmarks, IDX image loading,
//!   and class-incremental task streams.
//! * [`buffer`] — a reservoir-sampled rehearsal memory.
//! * [`train`] — per-task trainers: finetune, joint, ER, A-GEM, DER++.
//! * [`lsap`] — an exact linear sum assignment solver.
//! * [`matching`] — activation matching, weight permutation, linear
//!   interpolation, and post-merge statistics repair.
//! * [`metrics`] — accuracy matrix, forgetting measures, evaluation.
//!
//! Everything is seeded and single-threaded: the same inputs produce
//! byte-identical outputs on every run.

pub mod buffer;
pub mod data;
pub mod error;
pub mod lsap;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

#[doc(hidden)]
pub mod reference;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
