//! Continual-learning metrics.
//!
//! The central object is the accuracy matrix `A[j][t]`: accuracy on task
//! `t`'s test set after finishing training on task `j`. From its rows come
//!
//! * final average accuracy — mean of the last row over all tasks,
//! * last-task accuracy — the diagonal entry of the last row,
//! * forgetting — for each task except the last, the drop from its best
//!   post-training accuracy to its final accuracy, averaged.
//!
//! A loss-based diagnostic complements the accuracy view: the summed
//! increase in test cross-entropy on earlier tasks relative to the moment
//! each task finished training.

use crate::data::{eval_batches, Dataset, TaskData};
use crate::error::{CoreError, Result};
use crate::nn::{forward_eval, ParamSet};
use crate::tensor::kernels;

/// Accuracy matrix, one row appended after each task. Every row spans all
/// tasks of the stream (entries for not-yet-trained tasks measure zero-shot
/// transfer and are ignored by the forgetting summary).
#[derive(Debug, Clone)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    rows: Vec<Vec<f32>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            rows: Vec::with_capacity(num_tasks),
        }
    }

    /// Builds from explicit rows (each row one entry per task).
    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self> {
        let num_tasks = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != num_tasks) {
            return Err(CoreError::InvalidArgument {
                op: "AccuracyMatrix::from_rows",
                detail: "ragged rows".into(),
            });
        }
        Ok(Self { num_tasks, rows })
    }

    pub fn push_row(&mut self, row: Vec<f32>) -> Result<()> {
        if row.len() != self.num_tasks {
            return Err(CoreError::InvalidArgument {
                op: "AccuracyMatrix::push_row",
                detail: format!("row has {} entries, stream has {} tasks", row.len(), self.num_tasks),
            });
        }
        if self.rows.len() == self.num_tasks {
            return Err(CoreError::InvalidArgument {
                op: "AccuracyMatrix::push_row",
                detail: "matrix already complete".into(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed tasks (rows recorded so far).
    pub fn completed(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after_task: usize, on_task: usize) -> f32 {
        self.rows[after_task][on_task]
    }

    pub fn rows(&self) -> &[Vec<f32>] {
        &self.rows
    }

    /// Mean of the last row over all tasks.
    pub fn final_acc(&self) -> f32 {
        let last = self.rows.last().expect("empty accuracy matrix");
        (last.iter().map(|&v| v as f64).sum::<f64>() / last.len() as f64) as f32
    }

    /// Accuracy on the most recent task right after training it.
    pub fn last_task_acc(&self) -> f32 {
        let k = self.rows.len();
        self.rows[k - 1][k - 1]
    }

    /// Mean over earlier tasks of (best accuracy since training that task)
    /// minus (final accuracy). Zero for a single task by definition.
    pub fn forgetting(&self) -> f32 {
        let k = self.rows.len();
        if k <= 1 {
            return 0.0;
        }
        let mut total = 0.0f64;
        for t in 0..k - 1 {
            let best = (t..k)
                .map(|j| self.rows[j][t])
                .fold(f32::NEG_INFINITY, f32::max);
            total += (best - self.rows[k - 1][t]) as f64;
        }
        (total / (k - 1) as f64) as f32
    }
}

/// Top-1 accuracy on one dataset (inference mode, fixed batch order; the
/// argmax takes the first maximal logit, so results are deterministic).
pub fn accuracy(params: &ParamSet, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Err(CoreError::InvalidArgument {
            op: "accuracy",
            detail: "empty dataset".into(),
        });
    }
    let mut correct = 0usize;
    for batch in eval_batches(data, 64)? {
        let logits = forward_eval(params, &batch.x)?;
        let k = logits.shape()[1];
        let ld = logits.data();
        for (i, &y) in batch.y.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let mut arg = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = j;
                }
            }
            if arg == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f32 / data.len() as f32)
}

/// Mean cross-entropy on one dataset in inference mode.
pub fn mean_ce_loss(params: &ParamSet, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Err(CoreError::InvalidArgument {
            op: "mean_ce_loss",
            detail: "empty dataset".into(),
        });
    }
    let mut total = 0.0f64;
    for batch in eval_batches(data, 64)? {
        let logits = forward_eval(params, &batch.x)?;
        let (loss, _) = kernels::softmax_cross_entropy(&logits, &batch.y)?;
        total += loss as f64 * batch.len() as f64;
    }
    Ok((total / data.len() as f64) as f32)
}

/// Accuracy on every task's test set — one accuracy-matrix row.
pub fn evaluate(params: &ParamSet, tasks: &[TaskData]) -> Result<Vec<f32>> {
    tasks.iter().map(|t| accuracy(params, &t.test)).collect()
}

/// Loss-based forgetting: the summed increase of earlier tasks' test
/// cross-entropy under the current model relative to the checkpoint taken
/// when each task finished. `checkpoints[t]` is the model right after task
/// `t`; the last checkpoint is the current model, so the sum runs over all
/// earlier tasks.
pub fn loss_forgetting(checkpoints: &[ParamSet], tasks: &[TaskData]) -> Result<f32> {
    let Some((current, earlier)) = checkpoints.split_last() else {
        return Err(CoreError::InvalidArgument {
            op: "loss_forgetting",
            detail: "no checkpoints given".into(),
        });
    };
    if checkpoints.len() > tasks.len() {
        return Err(CoreError::InvalidArgument {
            op: "loss_forgetting",
            detail: format!("{} checkpoints for {} tasks", checkpoints.len(), tasks.len()),
        });
    }
    let mut total = 0.0f64;
    for (t, past) in earlier.iter().enumerate() {
        let now = mean_ce_loss(current, &tasks[t].test)?;
        let then = mean_ce_loss(past, &tasks[t].test)?;
        total += now as f64 - then as f64;
    }
    Ok(total as f32)
}
