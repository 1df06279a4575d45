//! Experiment configuration: a flat `key = value` text format with dotted
//! section prefixes. The schema is versioned and closed — unknown keys are
//! rejected so a typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clewi_core::nn::ArchId;
use clewi_core::train::{Method, TrainConfig};

/// Schema version this binary understands.
pub const CONFIG_VERSION: u64 = 1;

/// Method names from the wider literature that the config grammar knows
/// about but this lab deliberately does not implement.
const OUT_OF_SCOPE_METHODS: &[&str] = &["oewc", "si", "icarl", "gdumb", "er-ace", "mir", "bic"];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone)]
pub enum DatasetConfig {
    /// Seeded Gaussian blobs, split 5:1 into train/test per class.
    Synth {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f32,
    },
    /// IDX-format image files (train and test pairs), optionally
    /// standardized per channel.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        normalize: Option<(Vec<f32>, Vec<f32>)>,
    },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub num_tasks: usize,
    pub arch: ArchId,
    pub width: usize,
    pub train: TrainConfig,
    pub buffer_capacity: usize,
    pub clewi_enabled: bool,
    pub clewi_alpha: f32,
    pub sweep_alphas: Vec<f32>,
    pub sweep_widths: Vec<usize>,
    pub plot_alphas: Vec<f32>,
}

/// Interpolation strength used when the config does not set one; tuned per
/// wrapped rehearsal method.
pub fn default_alpha(method: Method) -> f32 {
    match method {
        Method::Er => 0.3,
        Method::Agem => 0.5,
        Method::Derpp => 0.2,
        Method::Finetune | Method::Joint => 0.3,
    }
}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// The default interpolation grid for accuracy-vs-alpha plots:
/// 0.0 to 1.0 in steps of 0.05 (21 points).
fn default_plot_grid() -> Vec<f32> {
    (0..=20).map(|i| i as f32 * 0.05).collect()
}

struct Raw {
    entries: BTreeMap<String, String>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(i) => &raw_line[..i],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!(
                    "line {}: expected 'key = value', got '{}'",
                    lineno + 1,
                    line
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(err(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(err(format!("line {}: duplicate key '{}'", lineno + 1, key)));
            }
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| err(format!("{}: cannot parse '{}'", key, v))),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => {
                let items: std::result::Result<Vec<T>, _> = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect();
                let items = items.map_err(|_| err(format!("{}: cannot parse list '{}'", key, v)))?;
                if items.is_empty() {
                    return Err(err(format!("{}: empty list", key)));
                }
                Ok(items)
            }
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut raw = Raw::parse(text)?;

    let version: u64 = match raw.take("config_version") {
        Some(v) => v
            .parse()
            .map_err(|_| err(format!("config_version: cannot parse '{}'", v)))?,
        None => return Err(err("missing required key 'config_version'")),
    };
    if version != CONFIG_VERSION {
        return Err(err(format!(
            "config_version {} is not supported (this binary understands {})",
            version, CONFIG_VERSION
        )));
    }

    let run_id = raw.take("run.id").unwrap_or_else(|| "run".into());
    if run_id.is_empty() || !run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(err(format!(
            "run.id '{}' must be non-empty and use only letters, digits, '-', '_', '.'",
            run_id
        )));
    }
    let seeds: Vec<u64> = raw.list("run.seeds", vec![1])?;
    let out = PathBuf::from(raw.take("run.out").unwrap_or_else(|| "results".into()));

    let dataset_id = raw
        .take("data.dataset")
        .unwrap_or_else(|| "split-synth-10".into());
    let num_tasks: usize = raw.parsed("data.num_tasks", 5)?;
    if num_tasks == 0 {
        return Err(err("data.num_tasks must be positive"));
    }

    let classes: usize = raw.parsed("data.classes", 10)?;
    let dim: usize = raw.parsed("data.dim", 32)?;
    let per_class: usize = raw.parsed("data.per_class", 60)?;
    let separation: f32 = raw.parsed("data.separation", 3.0)?;
    let norm_mean: Vec<f32> = raw.list("data.normalize.mean", vec![])?;
    let norm_std: Vec<f32> = raw.list("data.normalize.std", vec![])?;

    let idx_path = |raw: &mut Raw, key: &str| -> Result<Option<PathBuf>> {
        Ok(raw.take(key).map(PathBuf::from))
    };
    let idx_train_images = idx_path(&mut raw, "data.idx.train_images")?;
    let idx_train_labels = idx_path(&mut raw, "data.idx.train_labels")?;
    let idx_test_images = idx_path(&mut raw, "data.idx.test_images")?;
    let idx_test_labels = idx_path(&mut raw, "data.idx.test_labels")?;

    let dataset = match dataset_id.as_str() {
        "split-synth-10" => {
            if classes == 0 || dim < 2 || per_class == 0 {
                return Err(err(
                    "split-synth-10 needs data.classes ≥ 1, data.dim ≥ 2, data.per_class ≥ 1",
                ));
            }
            if classes % num_tasks != 0 {
                return Err(err(format!(
                    "data.classes = {} is not divisible by data.num_tasks = {}",
                    classes, num_tasks
                )));
            }
            DatasetConfig::Synth {
                classes,
                dim,
                per_class,
                separation,
            }
        }
        "split-idx" => {
            let need = |p: Option<PathBuf>, key: &str| {
                p.ok_or_else(|| err(format!("split-idx requires '{}'", key)))
            };
            let normalize = match (norm_mean.is_empty(), norm_std.is_empty()) {
                (true, true) => None,
                (false, false) => {
                    if norm_mean.len() != norm_std.len() {
                        return Err(err(
                            "data.normalize.mean and data.normalize.std must have equal lengths",
                        ));
                    }
                    Some((norm_mean, norm_std))
                }
                _ => {
                    return Err(err(
                        "data.normalize.mean and data.normalize.std must be given together",
                    ))
                }
            };
            DatasetConfig::Idx {
                train_images: need(idx_train_images, "data.idx.train_images")?,
                train_labels: need(idx_train_labels, "data.idx.train_labels")?,
                test_images: need(idx_test_images, "data.idx.test_images")?,
                test_labels: need(idx_test_labels, "data.idx.test_labels")?,
                normalize,
            }
        }
        other => {
            return Err(err(format!(
                "unknown data.dataset '{}' (expected split-synth-10 or split-idx)",
                other
            )))
        }
    };

    let arch_str = raw.take("model.arch").unwrap_or_else(|| "small-mlp".into());
    let arch = ArchId::parse(&arch_str).map_err(|e| err(e.to_string()))?;
    let width: usize = raw.parsed("model.width", 1)?;
    if width == 0 {
        return Err(err("model.width must be positive"));
    }

    let method_str = raw.take("train.method").unwrap_or_else(|| "er".into());
    if OUT_OF_SCOPE_METHODS.contains(&method_str.as_str()) {
        return Err(err(format!(
            "train.method '{}' is recognized but out of scope for this lab; \
             available methods: finetune, joint, er, agem, derpp",
            method_str
        )));
    }
    let method = Method::parse(&method_str).map_err(|e| err(e.to_string()))?;

    // Per-task epoch counts and learning rates are lab defaults, not values
    // carried over from any published protocol (see the config docs).
    let train = TrainConfig {
        method,
        lr: raw.parsed("train.lr", 0.03)?,
        momentum: raw.parsed("train.momentum", 0.0)?,
        epochs: raw.parsed("train.epochs", 5)?,
        batch_size: raw.parsed("train.batch_size", 32)?,
        rehearsal_batch_size: raw.parsed("train.rehearsal_batch_size", 32)?,
        derpp_lambda_mse: raw.parsed("train.derpp_lambda_mse", 0.5)?,
        derpp_lambda_ce: raw.parsed("train.derpp_lambda_ce", 0.5)?,
        rehearsal: raw.parsed("train.rehearsal", true)?,
        record_trace: false,
    };
    train.validate().map_err(|e| err(e.to_string()))?;

    let buffer_capacity: usize = raw.parsed("buffer.capacity", 200)?;
    if buffer_capacity == 0 {
        return Err(err("buffer.capacity must be positive"));
    }

    let clewi_enabled: bool = raw.parsed("clewi.enabled", false)?;
    let clewi_alpha: f32 = raw.parsed("clewi.alpha", default_alpha(method))?;
    if !(0.0..=1.0).contains(&clewi_alpha) {
        return Err(err(format!(
            "clewi.alpha must be in [0, 1], got {}",
            clewi_alpha
        )));
    }

    let sweep_alphas: Vec<f32> = raw.list("sweep.alphas", vec![0.1, 0.2, 0.3, 0.4, 0.5])?;
    if sweep_alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(err("sweep.alphas entries must be in [0, 1]"));
    }
    let sweep_widths: Vec<usize> = raw.list("sweep.widths", vec![1, 2, 4])?;
    if sweep_widths.iter().any(|&w| w == 0) {
        return Err(err("sweep.widths entries must be positive"));
    }
    let plot_alphas: Vec<f32> = raw.list("plot.alphas", default_plot_grid())?;
    if plot_alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(err("plot.alphas entries must be in [0, 1]"));
    }

    if let Some((key, _)) = raw.entries.iter().next() {
        return Err(err(format!("unknown config key '{}'", key)));
    }

    Ok(ExperimentConfig {
        run_id,
        seeds,
        out,
        dataset,
        num_tasks,
        arch,
        width,
        train,
        buffer_capacity,
        clewi_enabled,
        clewi_alpha,
        sweep_alphas,
        sweep_widths,
        plot_alphas,
    })
}
