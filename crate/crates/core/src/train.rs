//! Per-task trainers.
//!
//! All methods share one step skeleton per minibatch:
//!
//! 1. assemble the loss — cross-entropy on the new batch plus the method's
//!    rehearsal terms drawn from the memory buffer;
//! 2. backward + SGD step (A-GEM first projects the gradient);
//! 3. offer every sample of the new batch to the reservoir buffer.
//!
//! The buffer is sampled before the step and updated after it, so a step's
//! rehearsal batch can never contain samples from the same step. Rehearsal
//! terms are skipped while the buffer is still empty (the first batches of
//! the first task), and offers happen for every method — a plain finetune
//! run still populates the buffer for consumers such as post-task weight
//! interpolation.
//!
//! Methods:
//! * `finetune` — new-batch cross-entropy only;
//! * `joint` — same objective, but the caller feeds the cumulative union of
//!   all task data (upper-bound reference);
//! * `er` — adds cross-entropy on one buffer batch;
//! * `agem` — projects the new-batch gradient to be non-conflicting with a
//!   buffer-batch reference gradient;
//! * `derpp` — adds logit-distillation MSE on one buffer batch and
//!   cross-entropy on a second, independently drawn buffer batch, and
//!   stores logits alongside offered samples.

use crate::buffer::MemoryBuffer;
use crate::data::{batches, Dataset};
use crate::error::{CoreError, Result};
use crate::nn::{forward_train, ParamSet};
use crate::tensor::tape::{GradTape, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Finetune,
    Joint,
    Er,
    Agem,
    Derpp,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::Er => "er",
            Method::Agem => "agem",
            Method::Derpp => "derpp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Method::Finetune),
            "joint" => Ok(Method::Joint),
            "er" => Ok(Method::Er),
            "agem" => Ok(Method::Agem),
            "derpp" => Ok(Method::Derpp),
            other => Err(CoreError::InvalidArgument {
                op: "Method::parse",
                detail: format!("unknown training method '{}'", other),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f32,
    /// SGD momentum; 0 disables the velocity buffer. The buffer resets at
    /// each task boundary.
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub rehearsal_batch_size: usize,
    pub derpp_lambda_mse: f32,
    pub derpp_lambda_ce: f32,
    /// Ablation switch: with `false` the rehearsal loss terms are dropped
    /// for every method while buffer bookkeeping continues unchanged.
    pub rehearsal: bool,
    /// Record per-step [`TraceEvent`]s in the report (tests use these to
    /// pin down the order of operations).
    pub record_trace: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| {
            Err(CoreError::InvalidArgument {
                op: "TrainConfig::validate",
                detail,
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.rehearsal_batch_size == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        if self.derpp_lambda_mse < 0.0 || self.derpp_lambda_ce < 0.0 {
            return bad("logit-replay coefficients must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum TraceEvent {
    /// One optimizer step: the new-batch loss, the summed rehearsal terms
    /// (absent when skipped), and the total objective.
    Step {
        epoch: usize,
        step: usize,
        loss_new: f32,
        loss_rehearsal: Option<f32>,
        loss_total: f32,
    },
    /// Samples offered to the buffer after a step.
    BufferOffer {
        epoch: usize,
        step: usize,
        offered: usize,
        occupied_after: usize,
    },
    /// A-GEM fired its projection on this step.
    Projection {
        epoch: usize,
        step: usize,
        dot_before: f64,
        dot_after: f64,
        grad_norm: f64,
        ref_norm: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct TaskReport {
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f32>,
    pub steps: usize,
    pub trace: Vec<TraceEvent>,
}

/// splitmix64 — used to derive independent per-step sampling seeds from the
/// task seed without coupling the buffer, batch and method RNG streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_5b9f);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, epoch: usize, step: usize, slot: u64) -> u64 {
    mix(mix(mix(base ^ 0x5851_f42d_4c95_7f2d) ^ epoch as u64) ^ ((step as u64) << 8) ^ slot)
}

/// Trains `params` on one task's data. `seed` drives batch shuffling and
/// rehearsal sampling; the buffer replacement draws come from the buffer's
/// own generator. Returns per-epoch losses and the optional trace.
pub fn train_task(
    params: &mut ParamSet,
    data: &Dataset,
    buffer: &mut MemoryBuffer,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TaskReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::InvalidArgument {
            op: "train_task",
            detail: "task dataset is empty".into(),
        });
    }
    let trainable: Vec<String> = params.trainable_names().map(str::to_string).collect();
    let mut velocity: Option<Gradients> = if cfg.momentum > 0.0 {
        Some(Gradients::default())
    } else {
        None
    };
    let mut report = TaskReport::default();

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0f64;
        let mut epoch_steps = 0usize;
        for (step, batch) in batches(data, cfg.batch_size, seed, epoch as u64)?
            .into_iter()
            .enumerate()
        {
            let mut tape = GradTape::new();
            let logits_new = forward_train(params, &batch.x, &mut tape)?;
            let ce_new = tape.softmax_cross_entropy(logits_new, &batch.y)?;
            let loss_new = tape.value(ce_new).item();

            let rehearse = cfg.rehearsal && !buffer.is_empty() && cfg.method != Method::Agem;
            let mut loss_node = ce_new;
            let mut loss_rehearsal = None;
            match cfg.method {
                Method::Er if rehearse => {
                    let rb = buffer
                        .sample_batch(cfg.rehearsal_batch_size, derive_seed(seed, epoch, step, 1))?;
                    let logits_r = forward_train(params, &rb.x, &mut tape)?;
                    let ce_r = tape.softmax_cross_entropy(logits_r, &rb.y)?;
                    loss_rehearsal = Some(tape.value(ce_r).item());
                    loss_node = tape.add(ce_new, ce_r)?;
                }
                Method::Derpp if rehearse => {
                    let (rb1, stored_logits) = buffer.sample_batch_with_logits(
                        cfg.rehearsal_batch_size,
                        derive_seed(seed, epoch, step, 1),
                    )?;
                    let logits_1 = forward_train(params, &rb1.x, &mut tape)?;
                    let mse = tape.mse_const(logits_1, &stored_logits)?;
                    let mse_scaled = tape.scale(mse, cfg.derpp_lambda_mse);
                    let rb2 = buffer
                        .sample_batch(cfg.rehearsal_batch_size, derive_seed(seed, epoch, step, 2))?;
                    let logits_2 = forward_train(params, &rb2.x, &mut tape)?;
                    let ce_2 = tape.softmax_cross_entropy(logits_2, &rb2.y)?;
                    let ce_scaled = tape.scale(ce_2, cfg.derpp_lambda_ce);
                    loss_rehearsal = Some(
                        tape.value(mse_scaled).item() + tape.value(ce_scaled).item(),
                    );
                    let partial = tape.add(ce_new, mse_scaled)?;
                    loss_node = tape.add(partial, ce_scaled)?;
                }
                _ => {}
            }

            let loss_total = tape.value(loss_node).item();
            if !loss_total.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite loss {} at epoch {} step {}",
                    loss_total, epoch, step
                )));
            }
            let mut grads = tape.backward(loss_node)?;
            grads.require_all(trainable.iter().map(String::as_str))?;

            if cfg.method == Method::Agem && cfg.rehearsal && !buffer.is_empty() {
                let rb = buffer
                    .sample_batch(cfg.rehearsal_batch_size, derive_seed(seed, epoch, step, 1))?;
                let mut ref_tape = GradTape::new();
                let logits_r = forward_train(params, &rb.x, &mut ref_tape)?;
                let ce_r = ref_tape.softmax_cross_entropy(logits_r, &rb.y)?;
                let g_ref = ref_tape.backward(ce_r)?;
                let dot = grads.dot(&g_ref);
                if dot < 0.0 {
                    let denom = g_ref.norm_sq();
                    if denom > 0.0 {
                        grads.axpy(-dot / denom, &g_ref);
                        if cfg.record_trace {
                            report.trace.push(TraceEvent::Projection {
                                epoch,
                                step,
                                dot_before: dot,
                                dot_after: grads.dot(&g_ref),
                                grad_norm: grads.norm_sq().sqrt(),
                                ref_norm: denom.sqrt(),
                            });
                        }
                    }
                }
            }

            if !grads.is_all_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite gradient at epoch {} step {}",
                    epoch, step
                )));
            }
            sgd_step(params, &grads, cfg.lr, cfg.momentum, &mut velocity)?;
            if !params.is_all_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite parameters after epoch {} step {}",
                    epoch, step
                )));
            }

            // Reservoir offers come last, per the canonical step order.
            let store_logits = cfg.method == Method::Derpp;
            let logits_val = tape.value(logits_new).clone();
            for (i, &y) in batch.y.iter().enumerate() {
                let x_i = sample_from_batch(&batch.x, i)?;
                let logits_i = if store_logits {
                    Some(crate::tensor::Tensor::from_vec(
                        vec![logits_val.shape()[1]],
                        logits_val.row(i)?,
                    )?)
                } else {
                    None
                };
                buffer.reservoir_update(x_i, y, logits_i);
            }

            if cfg.record_trace {
                report.trace.push(TraceEvent::Step {
                    epoch,
                    step,
                    loss_new,
                    loss_rehearsal,
                    loss_total,
                });
                report.trace.push(TraceEvent::BufferOffer {
                    epoch,
                    step,
                    offered: batch.y.len(),
                    occupied_after: buffer.occupied(),
                });
            }
            epoch_loss += loss_total as f64;
            epoch_steps += 1;
            report.steps += 1;
        }
        report
            .epoch_loss
            .push((epoch_loss / epoch_steps.max(1) as f64) as f32);
    }
    Ok(report)
}

/// Extracts sample `i` of a stacked batch as its own tensor.
fn sample_from_batch(x: &crate::tensor::Tensor, i: usize) -> Result<crate::tensor::Tensor> {
    let shape = x.shape();
    let per: usize = shape[1..].iter().product();
    let data = x.data()[i * per..(i + 1) * per].to_vec();
    crate::tensor::Tensor::from_vec(shape[1..].to_vec(), data)
}

/// Plain SGD with optional momentum: `v = mu * v + g; theta -= lr * v`.
fn sgd_step(
    params: &mut ParamSet,
    grads: &Gradients,
    lr: f32,
    momentum: f32,
    velocity: &mut Option<Gradients>,
) -> Result<()> {
    let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
    match velocity {
        Some(v) => {
            let mut new_v = Gradients::default();
            new_v.axpy(momentum as f64, v);
            new_v.axpy(1.0, grads);
            for name in &names {
                let g = new_v.get(name).expect("require_all guaranteed gradients");
                let mut t = params.get(name)?.clone();
                for (p, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
                params.set(name, t)?;
            }
            *v = new_v;
        }
        None => {
            for name in &names {
                let g = grads.get(name).expect("require_all guaranteed gradients");
                let mut t = params.get(name)?.clone();
                for (p, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
                params.set(name, t)?;
            }
        }
    }
    Ok(())
}
