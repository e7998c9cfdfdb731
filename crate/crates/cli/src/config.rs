//! Experiment configuration: flat `key = value` files, named presets, CLI
//! overrides, and the fully expanded form written into every output
//! directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sae_core::train::{ReconLoss, TrainConfig};

use crate::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Variant {
    Vanilla,
    Semantic,
    #[value(name = "semantic-shuffled")]
    SemanticShuffled,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::Semantic => "semantic",
            Variant::SemanticShuffled => "semantic-shuffled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// One single-channel model trained on all channels pooled together,
    /// applied channel by channel at inference.
    Pooled,
    /// One model per channel.
    PerChannel,
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelMode::Pooled => "pooled",
            ChannelMode::PerChannel => "per-channel",
        })
    }
}

/// Every recognized configuration key, in the order they appear in the
/// expanded config.
const KNOWN_KEYS: &[&str] = &[
    "variant",
    "dataset",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "cifar_train",
    "cifar_test",
    "keep_classes",
    "channel_mode",
    "train_limit",
    "eval_limit",
    "batch_size",
    "base_lr",
    "iterations",
    "decay",
    "decay_interval",
    "lambda_cls",
    "seed",
    "eval_interval",
    "freeze_decoder",
    "recon",
    "shared_checkpoint",
    "out_dir",
    "sample_count",
    "perplexity",
    "clamp",
    "tool_version",
];

/// An ordered overlay of raw string settings, before typing.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    map: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::Usage(format!(
                "unknown configuration key `{key}`"
            )));
        }
        if key == "tool_version" {
            return Ok(()); // informational only, accepted on re-read
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn overlay(&mut self, other: &RawConfig) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    /// Parse a flat `key = value` file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut raw = RawConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            raw.set(key.trim(), value.trim())?;
        }
        Ok(raw)
    }

    /// Parse one `key=value` override from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects key=value, got `{pair}`"))
        })?;
        self.set(key.trim(), value.trim())
    }
}

/// Expand a preset name into explicit settings.
pub fn preset(name: &str) -> Result<RawConfig> {
    let pairs: &[(&str, &str)] = match name {
        // Full MNIST reconstruction-quality runs.
        "mnist-table2" => &[
            ("dataset", "mnist"),
            ("train_images", "data/mnist/train-images-idx3-ubyte.gz"),
            ("train_labels", "data/mnist/train-labels-idx1-ubyte.gz"),
            ("test_images", "data/mnist/t10k-images-idx3-ubyte.gz"),
            ("test_labels", "data/mnist/t10k-labels-idx1-ubyte.gz"),
            ("train_limit", "0"),
            ("eval_limit", "0"),
            ("iterations", "10000"),
        ],
        // Two-class CIFAR channel-separate pipeline for the attack.
        "cifar-attack" => &[
            ("dataset", "cifar10"),
            (
                "cifar_train",
                "data/cifar-10-batches-bin/data_batch_1.bin,\
                 data/cifar-10-batches-bin/data_batch_2.bin,\
                 data/cifar-10-batches-bin/data_batch_3.bin,\
                 data/cifar-10-batches-bin/data_batch_4.bin,\
                 data/cifar-10-batches-bin/data_batch_5.bin",
            ),
            ("cifar_test", "data/cifar-10-batches-bin/test_batch.bin"),
            ("keep_classes", "0,1"),
            ("channel_mode", "pooled"),
            ("train_limit", "0"),
            ("eval_limit", "0"),
            ("iterations", "10000"),
        ],
        // Minutes-scale MNIST run preserving the qualitative behavior.
        "desk-scale" => &[
            ("dataset", "mnist"),
            ("train_images", "data/mnist/train-images-idx3-ubyte.gz"),
            ("train_labels", "data/mnist/train-labels-idx1-ubyte.gz"),
            ("test_images", "data/mnist/t10k-images-idx3-ubyte.gz"),
            ("test_labels", "data/mnist/t10k-labels-idx1-ubyte.gz"),
            ("train_limit", "10000"),
            ("eval_limit", "1000"),
            ("iterations", "2000"),
        ],
        other => {
            return Err(CliError::Usage(format!(
                "unknown preset `{other}` (expected mnist-table2, cifar-attack, or desk-scale)"
            )))
        }
    };
    let mut raw = RawConfig::default();
    for (k, v) in pairs {
        raw.set(k, v)?;
    }
    Ok(raw)
}

/// Fully typed experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub dataset: DatasetKind,
    pub train_images: Option<String>,
    pub train_labels: Option<String>,
    pub test_images: Option<String>,
    pub test_labels: Option<String>,
    pub cifar_train: Vec<String>,
    pub cifar_test: Vec<String>,
    pub keep_classes: Vec<usize>,
    pub channel_mode: ChannelMode,
    /// 0 means "use everything".
    pub train_limit: usize,
    pub eval_limit: usize,
    pub train: TrainConfig,
    pub shared_checkpoint: Vec<String>,
    pub out_dir: Option<String>,
    pub sample_count: usize,
    pub perplexity: f64,
    pub clamp: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::Vanilla,
            dataset: DatasetKind::Mnist,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            cifar_train: Vec::new(),
            cifar_test: Vec::new(),
            keep_classes: Vec::new(),
            channel_mode: ChannelMode::Pooled,
            train_limit: 0,
            eval_limit: 0,
            train: TrainConfig::default(),
            shared_checkpoint: Vec::new(),
            out_dir: None,
            sample_count: 1000,
            perplexity: 30.0,
            clamp: true,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        CliError::Usage(format!("invalid value `{value}` for `{key}`"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Usage(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

fn parse_path_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl ExperimentConfig {
    /// Type-check a raw overlay on top of the defaults. The seed falls
    /// back to the `SAE_SEED` environment variable when no source sets it.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if raw.get("seed").is_none() {
            if let Ok(env_seed) = std::env::var("SAE_SEED") {
                cfg.train.seed = parse_num("SAE_SEED", env_seed.trim())?;
            }
        }
        for (key, value) in &raw.map {
            let v = value.as_str();
            match key.as_str() {
                "variant" => {
                    cfg.variant = match v {
                        "vanilla" => Variant::Vanilla,
                        "semantic" => Variant::Semantic,
                        "semantic-shuffled" => Variant::SemanticShuffled,
                        _ => {
                            return Err(CliError::Usage(format!(
                                "invalid variant `{v}` (vanilla, semantic, semantic-shuffled)"
                            )))
                        }
                    }
                }
                "dataset" => {
                    cfg.dataset = match v {
                        "mnist" => DatasetKind::Mnist,
                        "cifar10" => DatasetKind::Cifar10,
                        _ => {
                            return Err(CliError::Usage(format!(
                                "invalid dataset `{v}` (mnist or cifar10)"
                            )))
                        }
                    }
                }
                "train_images" => cfg.train_images = (!v.is_empty()).then(|| v.to_string()),
                "train_labels" => cfg.train_labels = (!v.is_empty()).then(|| v.to_string()),
                "test_images" => cfg.test_images = (!v.is_empty()).then(|| v.to_string()),
                "test_labels" => cfg.test_labels = (!v.is_empty()).then(|| v.to_string()),
                "cifar_train" => cfg.cifar_train = parse_path_list(v),
                "cifar_test" => cfg.cifar_test = parse_path_list(v),
                "keep_classes" => {
                    cfg.keep_classes = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| parse_num::<usize>("keep_classes", s))
                        .collect::<Result<_>>()?
                }
                "channel_mode" => {
                    cfg.channel_mode = match v {
                        "pooled" => ChannelMode::Pooled,
                        "per-channel" => ChannelMode::PerChannel,
                        _ => {
                            return Err(CliError::Usage(format!(
                                "invalid channel_mode `{v}` (pooled or per-channel)"
                            )))
                        }
                    }
                }
                "train_limit" => cfg.train_limit = parse_num(key, v)?,
                "eval_limit" => cfg.eval_limit = parse_num(key, v)?,
                "batch_size" => cfg.train.batch_size = parse_num(key, v)?,
                "base_lr" => cfg.train.base_lr = parse_num(key, v)?,
                "iterations" => cfg.train.iterations = parse_num(key, v)?,
                "decay" => cfg.train.decay = parse_num(key, v)?,
                "decay_interval" => cfg.train.decay_interval = parse_num(key, v)?,
                "lambda_cls" => cfg.train.lambda_cls = parse_num(key, v)?,
                "seed" => cfg.train.seed = parse_num(key, v)?,
                "eval_interval" => cfg.train.eval_interval = parse_num(key, v)?,
                "freeze_decoder" => cfg.train.freeze_decoder = parse_bool(key, v)?,
                "recon" => {
                    cfg.train.recon = match v {
                        "mse" => ReconLoss::Mse,
                        "bce" => ReconLoss::Bce,
                        _ => {
                            return Err(CliError::Usage(format!(
                                "invalid recon loss `{v}` (mse or bce)"
                            )))
                        }
                    }
                }
                "shared_checkpoint" => cfg.shared_checkpoint = parse_path_list(v),
                "out_dir" => cfg.out_dir = (!v.is_empty()).then(|| v.to_string()),
                "sample_count" => cfg.sample_count = parse_num(key, v)?,
                "perplexity" => cfg.perplexity = parse_num(key, v)?,
                "clamp" => cfg.clamp = parse_bool(key, v)?,
                _ => unreachable!("set() validated the key"),
            }
        }
        cfg.train.shuffle_labels = cfg.variant == Variant::SemanticShuffled;
        Ok(cfg)
    }

    /// The fully explicit configuration, suitable for re-running the
    /// command and written into every output directory.
    pub fn expanded(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("tool_version", env!("CARGO_PKG_VERSION").to_string());
        put("variant", self.variant.to_string());
        put("dataset", self.dataset.to_string());
        put("train_images", self.train_images.clone().unwrap_or_default());
        put("train_labels", self.train_labels.clone().unwrap_or_default());
        put("test_images", self.test_images.clone().unwrap_or_default());
        put("test_labels", self.test_labels.clone().unwrap_or_default());
        put("cifar_train", self.cifar_train.join(","));
        put("cifar_test", self.cifar_test.join(","));
        put(
            "keep_classes",
            self.keep_classes
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        put("channel_mode", self.channel_mode.to_string());
        put("train_limit", self.train_limit.to_string());
        put("eval_limit", self.eval_limit.to_string());
        put("batch_size", self.train.batch_size.to_string());
        put("base_lr", self.train.base_lr.to_string());
        put("iterations", self.train.iterations.to_string());
        put("decay", self.train.decay.to_string());
        put("decay_interval", self.train.decay_interval.to_string());
        put("lambda_cls", self.train.lambda_cls.to_string());
        put("seed", self.train.seed.to_string());
        put("eval_interval", self.train.eval_interval.to_string());
        put("freeze_decoder", self.train.freeze_decoder.to_string());
        put(
            "recon",
            match self.train.recon {
                ReconLoss::Mse => "mse".to_string(),
                ReconLoss::Bce => "bce".to_string(),
            },
        );
        put("shared_checkpoint", self.shared_checkpoint.join(","));
        put("out_dir", self.out_dir.clone().unwrap_or_default());
        put("sample_count", self.sample_count.to_string());
        put("perplexity", self.perplexity.to_string());
        put("clamp", self.clamp.to_string());
        out
    }

    pub fn require_out_dir(&self) -> Result<&str> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory (pass --out or out_dir)".into()))
    }
}

/// Assemble the effective config: defaults ← SAE_SEED ← preset ← config
/// file ← `--set` pairs ← dedicated flags (applied by the caller into
/// `flags`).
pub fn resolve(
    preset_name: Option<&str>,
    config_file: Option<&Path>,
    sets: &[String],
    flags: &RawConfig,
) -> Result<ExperimentConfig> {
    let mut raw = RawConfig::default();
    if let Some(name) = preset_name {
        raw.overlay(&preset(name)?);
    }
    if let Some(path) = config_file {
        raw.overlay(&RawConfig::from_file(path)?);
    }
    for pair in sets {
        raw.set_pair(pair)?;
    }
    raw.overlay(flags);
    ExperimentConfig::from_raw(&raw)
}
