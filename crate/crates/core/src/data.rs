//! Datasets, batching, and class-incremental task streams.
//!
//! Two dataset sources: Gaussian blob classification problems generated on
//! the fly (vector features, one blob per class), and IDX-format image
//! files (the classic big-endian format with magics `0x803`/`0x801`).
//! A [`TaskStream`] partitions a train/test dataset by class into equally
//! sized, disjoint tasks presented sequentially.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Tensor,
    pub y: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Train and test splits of one classification problem.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// One task of a class-incremental stream. Labels stay global — the model
/// head spans all classes of the full problem.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub num_classes: usize,
    /// Shuffled class order that defined the task partition.
    pub class_order: Vec<usize>,
}

/// A minibatch: stacked inputs plus labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Gaussian blob dataset: each class mean is drawn uniformly on the sphere
/// of radius `separation`, samples are mean + unit-variance Gaussian noise.
/// Generation order is fixed (means first, then classes in order), so a
/// seed fully determines the dataset.
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f32,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(CoreError::InvalidArgument {
            op: "synth_blobs",
            detail: "num_classes, dim and per_class must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let dir = Tensor::randn(&[dim], 1.0, &mut rng);
        let norm = dir.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let norm = if norm == 0.0 { 1.0 } else { norm };
        let mean: Vec<f32> = dir
            .data()
            .iter()
            .map(|&v| (v as f64 / norm) as f32 * separation)
            .collect();
        means.push(mean);
    }
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let noise = Tensor::randn(&[dim], 1.0, &mut rng);
            let x: Vec<f32> = noise.data().iter().zip(mean).map(|(n, m)| n + m).collect();
            samples.push(Sample {
                x: Tensor::from_vec(vec![dim], x)?,
                y: c,
            });
        }
    }
    Ok(Dataset {
        samples,
        num_classes,
    })
}

/// Deterministic 5:1 train/test split: within each class (in sample order)
/// the last sixth goes to test, the rest to train.
pub fn split_train_test(data: Dataset) -> Result<SplitDataset> {
    let num_classes = data.num_classes;
    let mut per_class: Vec<Vec<Sample>> = (0..num_classes).map(|_| Vec::new()).collect();
    for s in data.samples {
        per_class[s.y].push(s);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class_samples in per_class {
        let n = class_samples.len();
        let n_test = n / 6;
        for (i, s) in class_samples.into_iter().enumerate() {
            if i < n - n_test {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    Ok(SplitDataset {
        train: Dataset {
            samples: train,
            num_classes,
        },
        test: Dataset {
            samples: test,
            num_classes,
        },
    })
}

/// Partitions classes into `num_tasks` equal disjoint groups (class order
/// shuffled by `seed`) and filters both splits accordingly. Sample order
/// within a task follows the original dataset order.
pub fn split_by_class(data: &SplitDataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    let num_classes = data.train.num_classes;
    if num_tasks == 0 || num_classes % num_tasks != 0 {
        return Err(CoreError::InvalidArgument {
            op: "split_by_class",
            detail: format!(
                "{} classes cannot be split into {} equal tasks",
                num_classes, num_tasks
            ),
        });
    }
    if data.test.num_classes != num_classes {
        return Err(CoreError::InvalidArgument {
            op: "split_by_class",
            detail: "train and test splits disagree on the class count".into(),
        });
    }
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    class_order.shuffle(&mut rng);
    let per_task = num_classes / num_tasks;
    let mut tasks = Vec::with_capacity(num_tasks);
    for chunk in class_order.chunks(per_task) {
        let member = |y: usize| chunk.contains(&y);
        let filter = |src: &Dataset| Dataset {
            samples: src.samples.iter().filter(|s| member(s.y)).cloned().collect(),
            num_classes,
        };
        tasks.push(TaskData {
            classes: chunk.to_vec(),
            train: filter(&data.train),
            test: filter(&data.test),
        });
    }
    Ok(TaskStream {
        tasks,
        num_classes,
        class_order,
    })
}

/// Concatenation of several datasets (all sharing one label space), used
/// for the cumulative joint-training upper bound.
pub fn union(parts: &[&Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| CoreError::InvalidArgument {
        op: "union",
        detail: "no datasets given".into(),
    })?;
    let num_classes = first.num_classes;
    if parts.iter().any(|d| d.num_classes != num_classes) {
        return Err(CoreError::InvalidArgument {
            op: "union",
            detail: "datasets disagree on the class count".into(),
        });
    }
    Ok(Dataset {
        samples: parts.iter().flat_map(|d| d.samples.iter().cloned()).collect(),
        num_classes,
    })
}

fn read_be_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    if *pos + 4 > bytes.len() {
        return Err(CoreError::BadData(format!("truncated while reading {}", what)));
    }
    let v = u32::from_be_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Ok(v)
}

/// Loads an IDX image/label file pair. Pixels are scaled to `[0, 1]`;
/// samples come out as single-channel `[1, rows, cols]` tensors. The label
/// count must match the image count and neither file may carry trailing
/// bytes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path).map_err(|source| CoreError::Io {
        path: images_path.display().to_string(),
        source,
    })?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|source| CoreError::Io {
        path: labels_path.display().to_string(),
        source,
    })?;

    let mut pos = 0usize;
    let magic = read_be_u32(&img_bytes, &mut pos, "image magic")?;
    if magic != 0x0000_0803 {
        return Err(CoreError::BadData(format!(
            "image file has magic {:#010x}, expected 0x00000803",
            magic
        )));
    }
    let n = read_be_u32(&img_bytes, &mut pos, "image count")? as usize;
    let rows = read_be_u32(&img_bytes, &mut pos, "row count")? as usize;
    let cols = read_be_u32(&img_bytes, &mut pos, "column count")? as usize;
    let want = pos + n * rows * cols;
    if img_bytes.len() != want {
        return Err(CoreError::BadData(format!(
            "image payload is {} bytes, header implies {}",
            img_bytes.len() - pos,
            n * rows * cols
        )));
    }

    let mut lpos = 0usize;
    let lmagic = read_be_u32(&lbl_bytes, &mut lpos, "label magic")?;
    if lmagic != 0x0000_0801 {
        return Err(CoreError::BadData(format!(
            "label file has magic {:#010x}, expected 0x00000801",
            lmagic
        )));
    }
    let ln = read_be_u32(&lbl_bytes, &mut lpos, "label count")? as usize;
    if ln != n {
        return Err(CoreError::BadData(format!(
            "{} labels for {} images",
            ln, n
        )));
    }
    if lbl_bytes.len() != lpos + n {
        return Err(CoreError::BadData(format!(
            "label payload is {} bytes, header implies {}",
            lbl_bytes.len() - lpos,
            n
        )));
    }

    let mut samples = Vec::with_capacity(n);
    let mut max_label = 0usize;
    for i in 0..n {
        let raw = &img_bytes[pos + i * rows * cols..pos + (i + 1) * rows * cols];
        let data: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
        let y = lbl_bytes[lpos + i] as usize;
        max_label = max_label.max(y);
        samples.push(Sample {
            x: Tensor::from_vec(vec![1, rows, cols], data)?,
            y,
        });
    }
    Ok(Dataset {
        samples,
        num_classes: max_label + 1,
    })
}

/// Per-channel standardization `(x - mean) / std` applied in place.
pub fn normalize(data: &mut Dataset, mean: &[f32], std: &[f32]) -> Result<()> {
    if mean.len() != std.len() || std.iter().any(|&s| s <= 0.0) {
        return Err(CoreError::InvalidArgument {
            op: "normalize",
            detail: "mean/std lengths must match and std must be positive".into(),
        });
    }
    for s in &mut data.samples {
        let shape = s.x.shape().to_vec();
        let channels = if shape.len() == 3 { shape[0] } else { 1 };
        if channels != mean.len() {
            return Err(CoreError::ShapeMismatch {
                op: "normalize",
                detail: format!("{} channels, {} normalization entries", channels, mean.len()),
            });
        }
        let per = s.x.numel() / channels;
        let d = s.x.data_mut();
        for c in 0..channels {
            for i in 0..per {
                d[c * per + i] = (d[c * per + i] - mean[c]) / std[c];
            }
        }
    }
    Ok(())
}

/// Shuffled minibatches for one epoch. The shuffle is drawn from
/// `(seed, epoch)` — same arguments, same batches.
pub fn batches(data: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(CoreError::InvalidArgument {
            op: "batches",
            detail: "batch_size must be positive".into(),
        });
    }
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    chunk_batches(data, &order, batch_size)
}

/// Fixed-order minibatches (evaluation, statistics collection).
pub fn eval_batches(data: &Dataset, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(CoreError::InvalidArgument {
            op: "eval_batches",
            detail: "batch_size must be positive".into(),
        });
    }
    let order: Vec<usize> = (0..data.samples.len()).collect();
    chunk_batches(data, &order, batch_size)
}

fn chunk_batches(data: &Dataset, order: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
    let mut out = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let xs: Vec<&Tensor> = chunk.iter().map(|&i| &data.samples[i].x).collect();
        let y: Vec<usize> = chunk.iter().map(|&i| data.samples[i].y).collect();
        out.push(Batch {
            x: Tensor::stack(&xs)?,
            y,
        });
    }
    Ok(out)
}
