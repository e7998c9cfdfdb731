//! Dataset loading per the experiment config, channel pooling for the
//! CIFAR pipeline, and model application plans that hide whether a
//! checkpoint operates on whole images or channel by channel.

use std::path::Path;

use sae_core::data::{filter_classes, load_cifar10, load_mnist, split_channels, Dataset};
use sae_core::nets::{load_checkpoint, CheckpointMeta, Model};
use sae_core::tensor::Tensor;

use crate::config::{DatasetKind, ExperimentConfig};
use crate::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

fn require<'a>(path: &'a Option<String>, key: &str) -> Result<&'a str> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing dataset path `{key}`")))
}

fn check_exists(path: &str) -> Result<()> {
    if Path::new(path).exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("dataset file not found: {path}")))
    }
}

fn load(
    cfg: &ExperimentConfig,
    images: &Option<String>,
    labels: &Option<String>,
    cifar: &[String],
    limit: usize,
) -> Result<Dataset> {
    let mut ds = match cfg.dataset {
        DatasetKind::Mnist => {
            let images = require(images, "train_images/test_images")?;
            let labels = require(labels, "train_labels/test_labels")?;
            check_exists(images)?;
            check_exists(labels)?;
            load_mnist(images, labels)?
        }
        DatasetKind::Cifar10 => {
            if cifar.is_empty() {
                return Err(CliError::Usage(
                    "missing dataset path `cifar_train`/`cifar_test`".into(),
                ));
            }
            for p in cifar {
                check_exists(p)?;
            }
            load_cifar10(cifar)?
        }
    };
    if !cfg.keep_classes.is_empty() {
        ds = filter_classes(&ds, &cfg.keep_classes)?;
    }
    if limit > 0 && limit < ds.len() {
        ds = ds.take(limit);
    }
    Ok(ds)
}

pub fn load_train_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    load(
        cfg,
        &cfg.train_images,
        &cfg.train_labels,
        &cfg.cifar_train,
        cfg.train_limit,
    )
}

pub fn load_eval_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    load(
        cfg,
        &cfg.test_images,
        &cfg.test_labels,
        &cfg.cifar_test,
        cfg.eval_limit,
    )
}

/// Concatenate the per-channel views of a dataset into one single-channel
/// dataset (labels repeated per channel) for pooled training.
pub fn pool_channels(ds: &Dataset) -> Result<Dataset> {
    let parts = split_channels(ds);
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().unwrap());
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for part in &parts {
        pixels.extend_from_slice(&part.images().data());
        labels.extend_from_slice(part.labels());
    }
    let n: usize = parts.iter().map(Dataset::len).sum();
    let (h, w) = (ds.height(), ds.width());
    Ok(Dataset::new(
        Tensor::from_vec(pixels, &[n, h, w, 1])?,
        labels,
        ds.class_names().to_vec(),
        format!("{}#pooled", ds.source()),
    )?)
}

// ---------------------------------------------------------------------------
// Tensor-level channel plumbing (works on raw image tensors, which unlike
// Datasets may hold out-of-range values when clamping is disabled)
// ---------------------------------------------------------------------------

pub fn split_tensor_channels(t: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let (n, h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let data = t.data();
    (0..c)
        .map(|ch| {
            let plane: Vec<f32> = (0..n * h * w).map(|p| data[p * c + ch]).collect();
            Tensor::from_vec(plane, &[n, h, w, 1]).expect("channel plane shape")
        })
        .collect()
}

pub fn merge_tensor_channels(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let c = parts.len();
    let (n, h, w) = (
        parts[0].shape()[0],
        parts[0].shape()[1],
        parts[0].shape()[2],
    );
    let mut data = vec![0.0f32; n * h * w * c];
    for (ch, part) in parts.iter().enumerate() {
        for (p, &v) in part.data().iter().enumerate() {
            data[p * c + ch] = v;
        }
    }
    Tensor::from_vec(data, &[n, h, w, c]).expect("merged shape")
}

// ---------------------------------------------------------------------------
// Model plans
// ---------------------------------------------------------------------------

/// How trained weights apply to an evaluation batch: directly (channel
/// counts match), one pooled single-channel model swept over each channel,
/// or a dedicated model per channel.
pub enum ModelPlan {
    Direct(Model),
    Pooled(Model),
    PerChannel(Vec<Model>),
}

const EVAL_CHUNK: usize = 256;

impl ModelPlan {
    /// Load checkpoint(s) and decide how they apply to images with
    /// `channels` color channels.
    pub fn load(paths: &[String], channels: usize) -> Result<(Self, CheckpointMeta)> {
        if paths.is_empty() {
            return Err(CliError::Usage("no checkpoint path given".into()));
        }
        for p in paths {
            check_exists(p)?;
        }
        let mut loaded = Vec::new();
        let mut meta = None;
        for p in paths {
            let (model, m) = load_checkpoint(p)?;
            meta.get_or_insert(m);
            loaded.push(model);
        }
        let meta = meta.unwrap();
        let plan = if loaded.len() == 1 {
            let model = loaded.pop().unwrap();
            if model.arch.channels == channels {
                ModelPlan::Direct(model)
            } else if model.arch.channels == 1 {
                ModelPlan::Pooled(model)
            } else {
                return Err(CliError::Usage(format!(
                    "checkpoint expects {}-channel images but the dataset has {channels}",
                    model.arch.channels
                )));
            }
        } else {
            if loaded.len() != channels {
                return Err(CliError::Usage(format!(
                    "{} checkpoints given for {channels}-channel images",
                    loaded.len()
                )));
            }
            if loaded.iter().any(|m| m.arch.channels != 1) {
                return Err(CliError::Usage(
                    "per-channel checkpoints must be single-channel models".into(),
                ));
            }
            ModelPlan::PerChannel(loaded)
        };
        Ok((plan, meta))
    }

    fn model_for_channel(&self, ch: usize) -> &Model {
        match self {
            ModelPlan::Direct(m) | ModelPlan::Pooled(m) => m,
            ModelPlan::PerChannel(models) => &models[ch],
        }
    }

    fn chunked<T>(
        images: &Tensor<f32>,
        mut f: impl FnMut(&Tensor<f32>) -> Result<Vec<T>>,
    ) -> Result<Vec<T>> {
        let n = images.shape()[0];
        let per = images.len() / n;
        let shape = images.shape().to_vec();
        let data = images.data();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut chunk_shape = shape.clone();
            chunk_shape[0] = end - start;
            let chunk =
                Tensor::from_vec(data[start * per..end * per].to_vec(), &chunk_shape)?;
            out.extend(f(&chunk)?);
        }
        Ok(out)
    }

    /// Reconstruct a batch, merging per-channel outputs when applicable.
    pub fn reconstruct(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let rows: Vec<Vec<f32>> = Self::chunked(images, |chunk| {
            let recon = match self {
                ModelPlan::Direct(model) => model.reconstruct(chunk)?,
                _ => {
                    let parts: Vec<Tensor<f32>> = split_tensor_channels(chunk)
                        .iter()
                        .enumerate()
                        .map(|(ch, plane)| self.model_for_channel(ch).reconstruct(plane))
                        .collect::<std::result::Result<_, _>>()?;
                    merge_tensor_channels(&parts)
                }
            };
            let n = recon.shape()[0];
            let per = recon.len() / n;
            let data = recon.data();
            Ok((0..n).map(|i| data[i * per..(i + 1) * per].to_vec()).collect())
        })?;
        let mut shape = images.shape().to_vec();
        shape[0] = rows.len();
        Ok(Tensor::from_vec(rows.concat(), &shape)?)
    }

    /// Encode a batch into latent points; per-channel latents are
    /// concatenated in channel order.
    pub fn latents(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        Self::chunked(images, |chunk| {
            let per_channel: Vec<Tensor<f32>> = match self {
                ModelPlan::Direct(model) => vec![model.encoder.encode(chunk)?],
                _ => split_tensor_channels(chunk)
                    .iter()
                    .enumerate()
                    .map(|(ch, plane)| self.model_for_channel(ch).encoder.encode(plane))
                    .collect::<std::result::Result<_, _>>()?,
            };
            let n = chunk.shape()[0];
            let mut rows = vec![Vec::new(); n];
            for latent in &per_channel {
                let dim = latent.len() / n;
                let data = latent.data();
                for (i, row) in rows.iter_mut().enumerate() {
                    row.extend(data[i * dim..(i + 1) * dim].iter().map(|&v| v as f64));
                }
            }
            Ok(rows)
        })
    }
}
