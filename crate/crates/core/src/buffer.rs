//! Reservoir-sampled rehearsal memory.
//!
//! The buffer holds at most `capacity` samples. Every training sample is
//! offered exactly once; after the buffer fills, the i-th offered sample
//! (1-indexed) is kept with probability `capacity / i`, replacing a
//! uniformly random slot. This keeps each slot an unbiased uniform sample
//! of the full offer history: after `n ≥ capacity` offers, every offered
//! sample is retained with probability `capacity / n`.
//!
//! Slots optionally carry the model logits recorded when the sample was
//! offered (used for logit-replay training).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BufferSlot {
    pub x: Tensor,
    pub y: usize,
    pub logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: usize,
    seen: u64,
    slots: Vec<BufferSlot>,
    rng: ChaCha8Rng,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(CoreError::InvalidArgument {
                op: "MemoryBuffer::new",
                detail: "capacity must be positive".into(),
            });
        }
        Ok(Self {
            capacity,
            seen: 0,
            slots: Vec::with_capacity(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Samples currently held.
    pub fn occupied(&self) -> usize {
        self.slots.len()
    }

    /// Total samples ever offered.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[BufferSlot] {
        &self.slots
    }

    /// Offers one sample. While the buffer is filling the sample is
    /// appended; afterwards it replaces a uniform slot with probability
    /// `capacity / offers_so_far`. Randomness is consumed only on the
    /// replacement path, and only from the buffer's own generator.
    pub fn reservoir_update(&mut self, x: Tensor, y: usize, logits: Option<Tensor>) {
        let i = self.seen + 1; // this offer's 1-indexed position
        if self.slots.len() < self.capacity {
            self.slots.push(BufferSlot { x, y, logits });
        } else {
            let j = self.rng.random_range(0..i);
            if (j as usize) < self.capacity {
                self.slots[j as usize] = BufferSlot { x, y, logits };
            }
        }
        self.seen = i;
    }

    /// Uniform sample of `n` slots with replacement, drawn from a
    /// generator seeded only by `seed` (the buffer itself is untouched).
    pub fn sample_batch(&self, n: usize, seed: u64) -> Result<Batch> {
        let (batch, _) = self.sample_batch_inner(n, seed)?;
        Ok(batch)
    }

    /// Like [`Self::sample_batch`] but also stacks the stored logits of the
    /// drawn slots into an `[n, K]` tensor. Errors if any drawn slot has no
    /// stored logits.
    pub fn sample_batch_with_logits(&self, n: usize, seed: u64) -> Result<(Batch, Tensor)> {
        let (batch, idx) = self.sample_batch_inner(n, seed)?;
        let logit_refs: Vec<&Tensor> = idx
            .iter()
            .map(|&i| {
                self.slots[i].logits.as_ref().ok_or_else(|| {
                    CoreError::InvalidArgument {
                        op: "sample_batch_with_logits",
                        detail: format!("slot {} holds no stored logits", i),
                    }
                })
            })
            .collect::<Result<_>>()?;
        let logits = Tensor::stack(&logit_refs)?;
        Ok((batch, logits))
    }

    fn sample_batch_inner(&self, n: usize, seed: u64) -> Result<(Batch, Vec<usize>)> {
        if self.slots.is_empty() {
            return Err(CoreError::EmptyBuffer);
        }
        if n == 0 {
            return Err(CoreError::InvalidArgument {
                op: "sample_batch",
                detail: "batch size must be positive".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..self.slots.len()))
            .collect();
        let xs: Vec<&Tensor> = idx.iter().map(|&i| &self.slots[i].x).collect();
        let y: Vec<usize> = idx.iter().map(|&i| self.slots[i].y).collect();
        Ok((
            Batch {
                x: Tensor::stack(&xs)?,
                y,
            },
            idx,
        ))
    }

    /// All held samples in slot order, chunked into batches — the
    /// deterministic full pass used for activation statistics and
    /// batch-norm re-estimation.
    pub fn iterate_all(&self, batch_size: usize) -> Result<Vec<Batch>> {
        if self.slots.is_empty() {
            return Err(CoreError::EmptyBuffer);
        }
        if batch_size == 0 {
            return Err(CoreError::InvalidArgument {
                op: "iterate_all",
                detail: "batch size must be positive".into(),
            });
        }
        let mut out = Vec::with_capacity(self.slots.len().div_ceil(batch_size));
        for chunk in self.slots.chunks(batch_size) {
            let xs: Vec<&Tensor> = chunk.iter().map(|s| &s.x).collect();
            let y: Vec<usize> = chunk.iter().map(|s| s.y).collect();
            out.push(Batch {
                x: Tensor::stack(&xs)?,
                y,
            });
        }
        Ok(out)
    }
}
