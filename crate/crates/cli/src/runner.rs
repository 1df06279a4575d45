//! Experiment driver: builds class-incremental task streams, trains one
//! task at a time, merges the pre-task network back in when interpolation
//! is enabled, and writes metric rows, checkpoints, and summaries.

use std::fs;
use std::path::{Path, PathBuf};

use clewi_core::buffer::MemoryBuffer;
use clewi_core::data::{self, Dataset, SplitDataset, TaskStream};
use clewi_core::matching::{clewi_task_step, ACTIVATION_BATCH};
use clewi_core::metrics::{evaluate, loss_forgetting, AccuracyMatrix};
use clewi_core::nn::checkpoint::{load_checkpoint, save_checkpoint};
use clewi_core::nn::{build_model, equivalent_images, param_count, ArchId, ModelArch, ParamSet};
use clewi_core::train::{train_task, Method};
use clewi_core::CoreError;

use crate::config::{ConfigError, DatasetConfig, ExperimentConfig};
use crate::output::{mean_std, write_summary, write_table, ResultsWriter, Summary};

/// CLI failures carry the process exit code: 2 for configuration problems,
/// 3 for unreadable or inconsistent input data, 4 for training divergence,
/// 1 for anything else.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Diverged(String),
    Other(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Diverged(m) | CliError::Other(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("i/o error: {}", e))
    }
}

/// Classify a core error raised while loading or splitting data: broken
/// input files are data errors, bad shapes or sizes are config errors.
fn data_phase(e: CoreError) -> CliError {
    match &e {
        CoreError::BadData { .. }
        | CoreError::Io { .. }
        | CoreError::CorruptCheckpoint { .. }
        | CoreError::CheckpointMismatch { .. } => CliError::Data(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

/// Classify a core error raised during training or merging.
fn train_phase(e: CoreError) -> CliError {
    match &e {
        CoreError::Diverged { .. } => CliError::Diverged(e.to_string()),
        _ => CliError::Other(e.to_string()),
    }
}

/// splitmix64, used to derive independent sub-seeds (data generation, class
/// order, model init, buffer, per-task training) from one user-facing seed.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_5b9f);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream))
}

fn method_name(method: Method) -> &'static str {
    match method {
        Method::Finetune => "finetune",
        Method::Joint => "joint",
        Method::Er => "er",
        Method::Agem => "agem",
        Method::Derpp => "derpp",
    }
}

pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream, CliError> {
    let split = match &cfg.dataset {
        DatasetConfig::Synth {
            classes,
            dim,
            per_class,
            separation,
        } => {
            let data = data::synth_blobs(*classes, *dim, *per_class, *separation, sub_seed(seed, 1))
                .map_err(data_phase)?;
            data::split_train_test(data).map_err(data_phase)?
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            normalize,
        } => {
            let mut train = data::load_idx(train_images, train_labels).map_err(data_phase)?;
            let mut test = data::load_idx(test_images, test_labels).map_err(data_phase)?;
            if let Some((mean, std)) = normalize {
                data::normalize(&mut train, mean, std).map_err(data_phase)?;
                data::normalize(&mut test, mean, std).map_err(data_phase)?;
            }
            // The two files may not each contain every class; the stream
            // spans their union.
            let classes = train.num_classes.max(test.num_classes);
            train.num_classes = classes;
            test.num_classes = classes;
            SplitDataset { train, test }
        }
    };
    data::split_by_class(&split, cfg.num_tasks, sub_seed(seed, 2)).map_err(data_phase)
}

/// Model input shape for the sample shape found in the stream: the MLP
/// flattens, the conv nets need `[C, H, W]` — square single-channel for
/// flat feature vectors.
fn input_shape(arch: ArchId, sample_shape: &[usize]) -> Result<Vec<usize>, CliError> {
    let numel: usize = sample_shape.iter().product();
    match arch {
        ArchId::SmallMlp => Ok(vec![numel]),
        ArchId::SmallConvnet | ArchId::SmallResnet => {
            if sample_shape.len() == 3 {
                return Ok(sample_shape.to_vec());
            }
            let side = (numel as f64).sqrt().round() as usize;
            if side * side == numel {
                Ok(vec![1, side, side])
            } else {
                Err(CliError::Config(format!(
                    "conv architectures need image-shaped inputs; {} features is not a square",
                    numel
                )))
            }
        }
    }
}

struct SeedRun {
    matrix: AccuracyMatrix,
}

/// One seed of the standard experiment loop. Emits per-boundary metric rows
/// and checkpoints; returns the filled accuracy matrix.
#[allow(clippy::too_many_arguments)]
fn run_seed(
    cfg: &ExperimentConfig,
    run_id: &str,
    seed: u64,
    writer: &mut ResultsWriter,
    ckpt_dir: Option<&Path>,
    quiet: bool,
) -> Result<SeedRun, CliError> {
    let stream = build_stream(cfg, seed)?;
    let num_tasks = stream.tasks.len();
    let sample_shape = stream.tasks[0].train.samples[0].x.shape().to_vec();
    let arch = ModelArch::new(
        cfg.arch,
        cfg.width,
        stream.num_classes,
        input_shape(cfg.arch, &sample_shape)?,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let mut params = build_model(&arch, sub_seed(seed, 3));
    let mut buffer =
        MemoryBuffer::new(cfg.buffer_capacity, sub_seed(seed, 4)).map_err(|e| CliError::Config(e.to_string()))?;
    let mut prev: Option<ParamSet> = None;
    let mut matrix = AccuracyMatrix::new(num_tasks);
    let mut snapshots: Vec<ParamSet> = Vec::new();

    for (t, task) in stream.tasks.iter().enumerate() {
        // Joint is the upper-baseline: it always trains on everything seen
        // so far, so the runner hands it the cumulative union.
        let train_data: Dataset = if cfg.train.method == Method::Joint {
            let parts: Vec<&Dataset> = stream.tasks[..=t].iter().map(|tk| &tk.train).collect();
            data::union(&parts).map_err(train_phase)?
        } else {
            task.train.clone()
        };

        train_task(
            &mut params,
            &train_data,
            &mut buffer,
            &cfg.train,
            sub_seed(seed, 16 + t as u64),
        )
        .map_err(train_phase)?;

        if cfg.clewi_enabled {
            if let Some(prev_params) = &prev {
                let outcome = clewi_task_step(
                    &params,
                    prev_params,
                    &buffer,
                    cfg.clewi_alpha,
                    ACTIVATION_BATCH,
                )
                .map_err(train_phase)?;
                params = outcome.merged;
                for (group, corr) in &outcome.matched_corr {
                    writer.row(run_id, seed, t, &format!("matched_corr_g{}", group), *corr as f32)?;
                }
            }
            prev = Some(params.clone());
        }

        let row = evaluate(&params, &stream.tasks).map_err(train_phase)?;
        for (j, &acc_j) in row.iter().enumerate() {
            writer.row(run_id, seed, t, &format!("acc_task_{}", j), acc_j)?;
        }
        // Means accumulate in f64 to match the accuracy-matrix accessors,
        // so the CSV rows and summary.json agree bit for bit.
        let acc_seen =
            (row[..=t].iter().map(|&v| v as f64).sum::<f64>() / (t + 1) as f64) as f32;
        matrix.push_row(row).map_err(train_phase)?;
        let acc_all = matrix.final_acc();
        writer.row(run_id, seed, t, "acc", acc_all)?;
        writer.row(run_id, seed, t, "acc_seen", acc_seen)?;
        writer.row(run_id, seed, t, "acc_last", matrix.last_task_acc())?;
        writer.row(run_id, seed, t, "fm", matrix.forgetting())?;

        snapshots.push(params.clone());
        let loss_fm =
            loss_forgetting(&snapshots, &stream.tasks[..snapshots.len()]).map_err(train_phase)?;
        writer.row(run_id, seed, t, "loss_forget", loss_fm)?;

        if let Some(dir) = ckpt_dir {
            let path = dir.join(format!("{}_s{}_t{}.ckpt", run_id, seed, t));
            save_checkpoint(&params, &path).map_err(train_phase)?;
        }
        writer.flush()?;
        if !quiet {
            println!(
                "[{}] seed {} task {}/{}: acc {:.4} fm {:.4}",
                run_id,
                seed,
                t + 1,
                num_tasks,
                acc_all,
                matrix.forgetting()
            );
        }
    }

    Ok(SeedRun { matrix })
}

fn summarize(run_id: &str, seeds: &[u64], matrices: &[AccuracyMatrix]) -> Summary {
    let accs: Vec<f64> = matrices.iter().map(|m| m.final_acc() as f64).collect();
    let lasts: Vec<f64> = matrices.iter().map(|m| m.last_task_acc() as f64).collect();
    let fms: Vec<f64> = matrices.iter().map(|m| m.forgetting() as f64).collect();
    Summary {
        run_id: run_id.to_string(),
        seeds: seeds.to_vec(),
        num_tasks: matrices.first().map_or(0, |m| m.rows().len()),
        acc: mean_std(&accs),
        acc_last: mean_std(&lasts),
        fm: mean_std(&fms),
    }
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<(PathBuf, ResultsWriter), CliError> {
    let out = cfg.out.clone();
    fs::create_dir_all(out.join("checkpoints"))?;
    let writer = ResultsWriter::create(&out.join("results.csv"))?;
    Ok((out, writer))
}

pub fn cmd_run(cfg: &ExperimentConfig, quiet: bool) -> Result<(), CliError> {
    let (out, mut writer) = prepare_out(cfg)?;
    let ckpt_dir = out.join("checkpoints");
    let mut matrices = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, &cfg.run_id, seed, &mut writer, Some(&ckpt_dir), quiet)?;
        matrices.push(run.matrix);
    }
    writer.flush()?;
    let summary = summarize(&cfg.run_id, &cfg.seeds, &matrices);
    write_summary(&out.join("summary.json"), &summary)?;
    if !quiet {
        println!(
            "[{}] done: acc {:.4} ± {:.4}, fm {:.4} ± {:.4} over {} seed(s)",
            cfg.run_id,
            summary.acc.mean,
            summary.acc.std,
            summary.fm.mean,
            summary.fm.std,
            cfg.seeds.len()
        );
        println!("results: {}", out.join("results.csv").display());
    }
    Ok(())
}

pub fn cmd_sweep_alpha(cfg: &ExperimentConfig, quiet: bool) -> Result<(), CliError> {
    if !cfg.clewi_enabled {
        return Err(CliError::Config(
            "sweep-alpha varies the interpolation strength, so it needs clewi.enabled = true".into(),
        ));
    }
    let (out, mut writer) = prepare_out(cfg)?;
    let ckpt_dir = out.join("checkpoints");
    let mut table = Vec::new();
    for &alpha in &cfg.sweep_alphas {
        let mut sub = cfg.clone();
        sub.clewi_alpha = alpha;
        let sub_id = format!("{}.a{}", cfg.run_id, alpha);
        let mut matrices = Vec::new();
        for &seed in &cfg.seeds {
            let run = run_seed(&sub, &sub_id, seed, &mut writer, Some(&ckpt_dir), quiet)?;
            matrices.push(run.matrix);
        }
        let s = summarize(&sub_id, &cfg.seeds, &matrices);
        table.push(vec![
            alpha.to_string(),
            s.acc.mean.to_string(),
            s.acc_last.mean.to_string(),
            s.fm.mean.to_string(),
        ]);
    }
    writer.flush()?;
    write_table(&out.join("alpha_sweep.csv"), "alpha,acc,acc_last,fm", &table)?;
    if !quiet {
        println!("alpha sweep table: {}", out.join("alpha_sweep.csv").display());
    }
    Ok(())
}

pub fn cmd_width_sweep(cfg: &ExperimentConfig, quiet: bool) -> Result<(), CliError> {
    let (out, mut writer) = prepare_out(cfg)?;
    let ckpt_dir = out.join("checkpoints");
    let mut table = Vec::new();
    for &width in &cfg.sweep_widths {
        let mut sub = cfg.clone();
        sub.width = width;
        let sub_id = format!("{}.w{}", cfg.run_id, width);
        let mut matrices = Vec::new();
        for &seed in &cfg.seeds {
            let run = run_seed(&sub, &sub_id, seed, &mut writer, Some(&ckpt_dir), quiet)?;
            matrices.push(run.matrix);
        }
        let s = summarize(&sub_id, &cfg.seeds, &matrices);
        table.push(vec![
            width.to_string(),
            method_name(cfg.train.method).to_string(),
            s.acc.mean.to_string(),
        ]);
    }
    writer.flush()?;
    write_table(&out.join("width_sweep.csv"), "width,method,acc", &table)?;
    if !quiet {
        println!("width sweep table: {}", out.join("width_sweep.csv").display());
    }
    Ok(())
}

/// Trains the stream normally, but at the final task sweeps the merge over
/// a grid of interpolation strengths instead of applying the configured
/// one, recording per-task accuracy at every grid point. The sweep itself
/// is pure: every grid point merges the same two endpoint networks.
pub fn cmd_interp_plot(cfg: &ExperimentConfig, quiet: bool) -> Result<(), CliError> {
    if cfg.num_tasks < 2 {
        return Err(CliError::Config(
            "interp-plot needs at least two tasks (the merge pairs the networks before and after the final task)".into(),
        ));
    }
    let seed = cfg.seeds[0];
    let stream = build_stream(cfg, seed)?;
    let num_tasks = stream.tasks.len();
    let sample_shape = stream.tasks[0].train.samples[0].x.shape().to_vec();
    let arch = ModelArch::new(
        cfg.arch,
        cfg.width,
        stream.num_classes,
        input_shape(cfg.arch, &sample_shape)?,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let mut params = build_model(&arch, sub_seed(seed, 3));
    let mut buffer =
        MemoryBuffer::new(cfg.buffer_capacity, sub_seed(seed, 4)).map_err(|e| CliError::Config(e.to_string()))?;
    let mut prev: Option<ParamSet> = None;

    for (t, task) in stream.tasks.iter().enumerate() {
        let train_data: Dataset = if cfg.train.method == Method::Joint {
            let parts: Vec<&Dataset> = stream.tasks[..=t].iter().map(|tk| &tk.train).collect();
            data::union(&parts).map_err(train_phase)?
        } else {
            task.train.clone()
        };
        train_task(
            &mut params,
            &train_data,
            &mut buffer,
            &cfg.train,
            sub_seed(seed, 16 + t as u64),
        )
        .map_err(train_phase)?;
        if t + 1 < num_tasks {
            // Warm-up boundaries follow the configured pipeline; the final
            // boundary is replaced by the sweep below.
            if cfg.clewi_enabled {
                if let Some(prev_params) = &prev {
                    let outcome = clewi_task_step(
                        &params,
                        prev_params,
                        &buffer,
                        cfg.clewi_alpha,
                        ACTIVATION_BATCH,
                    )
                    .map_err(train_phase)?;
                    params = outcome.merged;
                }
            }
            prev = Some(params.clone());
        }
        if !quiet {
            println!("[{}] seed {} task {}/{} trained", cfg.run_id, seed, t + 1, num_tasks);
        }
    }

    let prev = prev.expect("at least two tasks");
    let mut rows = Vec::new();
    for &alpha in &cfg.plot_alphas {
        let outcome =
            clewi_task_step(&params, &prev, &buffer, alpha, ACTIVATION_BATCH).map_err(train_phase)?;
        let accs = evaluate(&outcome.merged, &stream.tasks).map_err(train_phase)?;
        for (task, &acc) in accs.iter().enumerate() {
            rows.push(vec![task.to_string(), alpha.to_string(), acc.to_string()]);
        }
    }
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("interp_plot.csv");
    write_table(&path, "task,alpha,accuracy", &rows)?;
    if !quiet {
        println!("interpolation plot: {}", path.display());
    }
    Ok(())
}

/// Weight-versus-buffer memory accounting: how many 8-bit images the model
/// weights are worth, and the rehearsal buffer size an example-storing
/// method would need to match a weight-storing one.
pub fn cmd_memory_budget(
    cfg: Option<&ExperimentConfig>,
    params_override: Option<usize>,
    image_override: Option<&str>,
    buffer_override: Option<usize>,
) -> Result<String, CliError> {
    let image: (usize, usize, usize) = match image_override {
        Some(text) => {
            let dims: Vec<usize> = text
                .split('x')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Config(format!("--image: cannot parse '{}' as CxHxW", text)))?;
            if dims.len() != 3 || dims.iter().any(|&d| d == 0) {
                return Err(CliError::Config(format!(
                    "--image: expected three positive dims CxHxW, got '{}'",
                    text
                )));
            }
            (dims[0], dims[1], dims[2])
        }
        None => {
            let cfg = cfg.ok_or_else(|| {
                CliError::Config("memory-budget needs --config or an explicit --image".into())
            })?;
            match &cfg.dataset {
                DatasetConfig::Synth { dim, .. } => match cfg.arch {
                    ArchId::SmallMlp => (1, 1, *dim),
                    _ => {
                        let side = (*dim as f64).sqrt().round() as usize;
                        if side * side != *dim {
                            return Err(CliError::Config(format!(
                                "conv architectures need square inputs; data.dim = {} is not a square",
                                dim
                            )));
                        }
                        (1, side, side)
                    }
                },
                DatasetConfig::Idx { .. } => {
                    return Err(CliError::Config(
                        "memory-budget cannot derive the image shape from IDX files; pass --image CxHxW"
                            .into(),
                    ))
                }
            }
        }
    };

    let params = match params_override {
        Some(n) => n,
        None => {
            let cfg = cfg.ok_or_else(|| {
                CliError::Config("memory-budget needs --config or an explicit --params".into())
            })?;
            let classes = match &cfg.dataset {
                DatasetConfig::Synth { classes, .. } => *classes,
                DatasetConfig::Idx { .. } => {
                    return Err(CliError::Config(
                        "memory-budget cannot derive the class count from IDX files; pass --params"
                            .into(),
                    ))
                }
            };
            let shape = match cfg.arch {
                ArchId::SmallMlp => vec![image.0 * image.1 * image.2],
                _ => vec![image.0, image.1, image.2],
            };
            let arch = ModelArch::new(cfg.arch, cfg.width, classes, shape)
                .map_err(|e| CliError::Config(e.to_string()))?;
            param_count(&build_model(&arch, 0))
        }
    };

    let buffer_images = match buffer_override {
        Some(n) => n,
        None => cfg.map_or(0, |c| c.buffer_capacity),
    };

    let weight_bytes = params * 4;
    let image_bytes = image.0 * image.1 * image.2;
    let equivalent = equivalent_images(params, image);
    let report = format!(
        "parameters:           {}\n\
         weight_bytes:         {}\n\
         image_bytes:          {}\n\
         equivalent_images:    {}\n\
         buffer_images:        {}\n\
         er_equivalent_buffer: {}\n",
        params,
        weight_bytes,
        image_bytes,
        equivalent,
        buffer_images,
        buffer_images + equivalent
    );
    Ok(report)
}

/// Evaluate a saved checkpoint on every task of the configured stream.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, quiet: bool) -> Result<(), CliError> {
    let params = load_checkpoint(checkpoint).map_err(data_phase)?;
    let seed = cfg.seeds[0];
    let stream = build_stream(cfg, seed)?;
    if params.arch().num_classes != stream.num_classes {
        return Err(CliError::Data(format!(
            "checkpoint has {} classes but the configured stream has {}",
            params.arch().num_classes,
            stream.num_classes
        )));
    }
    let accs = evaluate(&params, &stream.tasks).map_err(train_phase)?;
    let mean = accs.iter().sum::<f32>() / accs.len() as f32;
    for (t, &a) in accs.iter().enumerate() {
        println!("task {}: acc {:.4}", t, a);
    }
    println!("mean: {:.4}", mean);
    if !quiet {
        println!("(stream from seed {}, {} tasks)", seed, accs.len());
    }
    Ok(())
}
