//! Training loops for the vanilla and semantic autoencoders.
//!
//! Both variants share one recipe (Adam, batch 32, lr 0.001 decayed ×0.96
//! every 100 iterations); they differ only in whether a classification term
//! over the latent code joins the objective, whether batch labels are
//! shuffled before that term, and whether the decoder is a frozen copy of a
//! previously trained one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::data::{batches, Dataset};
use crate::nets::{ArchConfig, Model};
use crate::tensor::{
    adam_step, add, binary_cross_entropy, lr_schedule, mean_all, mul, scale,
    softmax_cross_entropy, sub, AdamState, Scalar, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Reconstruction objective. MSE is the default; BCE suits the sigmoid
/// output range and is selectable by config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconLoss {
    #[default]
    Mse,
    Bce,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f32,
    pub iterations: u64,
    pub decay: f32,
    pub decay_interval: u64,
    /// Weight of the classification term; 0 reproduces the vanilla
    /// objective exactly (the classifier branch is not even evaluated).
    pub lambda_cls: f32,
    pub shuffle_labels: bool,
    pub seed: u64,
    /// Trace-recording cadence in iterations.
    pub eval_interval: u64,
    /// Whether a shared decoder stays frozen; ignored when no decoder is
    /// shared.
    pub freeze_decoder: bool,
    pub recon: ReconLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            base_lr: 0.001,
            iterations: 10_000,
            decay: 0.96,
            decay_interval: 100,
            lambda_cls: 1.0,
            shuffle_labels: false,
            seed: 0,
            eval_interval: 100,
            freeze_decoder: true,
            recon: ReconLoss::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive");
        }
        if !(self.base_lr > 0.0) {
            problems.push("base_lr must be positive");
        }
        if self.iterations == 0 {
            problems.push("iterations must be positive");
        }
        if !(self.decay > 0.0) {
            problems.push("decay must be positive");
        }
        if self.decay_interval == 0 {
            problems.push("decay_interval must be positive");
        }
        if !(self.lambda_cls >= 0.0) {
            problems.push("lambda_cls must be non-negative");
        }
        if self.eval_interval == 0 {
            problems.push("eval_interval must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: u64,
    pub recon_loss: f32,
    pub cls_loss: f32,
    pub total_loss: f32,
    pub lr: f32,
}

/// Loss trajectory sampled every `eval_interval` iterations (plus the final
/// one).
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,recon_loss,cls_loss,total_loss,lr\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.recon_loss, r.cls_loss, r.total_loss, r.lr
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Divergence between an input batch and its reconstruction.
pub fn recon_loss<E: Scalar>(
    x: &Tensor<E>,
    x_hat: &Tensor<E>,
    kind: ReconLoss,
) -> Result<Tensor<E>> {
    let loss = match kind {
        ReconLoss::Mse => {
            let diff = sub(x_hat, x)?;
            mean_all(&mul(&diff, &diff)?)
        }
        ReconLoss::Bce => binary_cross_entropy(x_hat, x)?,
    };
    Ok(loss)
}

/// Mean softmax cross-entropy of latent-classifier logits.
pub fn cls_loss<E: Scalar>(logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
    Ok(softmax_cross_entropy(logits, labels)?)
}

/// `recon + λ·cls`. With λ = 0 the classification term drops out of the
/// graph entirely, so gradients match the vanilla objective bit for bit.
pub fn total_loss<E: Scalar>(
    recon: &Tensor<E>,
    cls: &Tensor<E>,
    lambda: E,
) -> Result<Tensor<E>> {
    if lambda == E::ZERO {
        return Ok(recon.clone());
    }
    Ok(add(recon, &scale(cls, lambda))?)
}

/// Uniformly random permutation of a batch's labels — the corruption that
/// turns semantic training into adversarial training. Re-drawn per call.
pub fn shuffle_labels(labels: &[usize], rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut shuffled = labels.to_vec();
    shuffled.shuffle(rng);
    shuffled
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

// Stream 5 of the run seed (1–3: sub-net init, 4: batch order).
const STREAM_LABEL_SHUFFLE: u64 = 5;

#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub trace: TrainTrace,
}

/// Train encoder + decoder on the reconstruction objective alone.
pub fn train_vanilla(config: &TrainConfig, ds: &Dataset) -> Result<TrainResult> {
    run_training(config, ds, Variant::Vanilla, None)
}

/// Train the semantic variant: encoder + decoder + latent classifier,
/// jointly optimizing `recon + λ·cls`.
///
/// With `shuffle_labels` the classifier is fed per-batch permuted labels;
/// that mode requires `shared_decoder` (the adversarial protocol reuses the
/// vanilla decoder so both variants decode the same way).
pub fn train_semantic(
    config: &TrainConfig,
    ds: &Dataset,
    shared_decoder: Option<&Model>,
) -> Result<TrainResult> {
    if config.shuffle_labels && shared_decoder.is_none() {
        return Err(TrainError::Config(
            "label shuffling requires a shared (vanilla-trained) decoder".into(),
        ));
    }
    run_training(config, ds, Variant::Semantic, shared_decoder)
}

enum Variant {
    Vanilla,
    Semantic,
}

fn run_training(
    config: &TrainConfig,
    ds: &Dataset,
    variant: Variant,
    shared_decoder: Option<&Model>,
) -> Result<TrainResult> {
    config.validate()?;
    if ds.len() < config.batch_size {
        return Err(TrainError::Config(format!(
            "dataset has {} samples, fewer than the batch size {}",
            ds.len(),
            config.batch_size
        )));
    }
    let arch = ArchConfig {
        height: ds.height(),
        width: ds.width(),
        channels: ds.channels(),
        num_classes: ds.num_classes(),
    };
    let with_classifier = matches!(variant, Variant::Semantic);
    let mut model = Model::init(arch, config.seed, with_classifier)?;
    if let Some(source) = shared_decoder {
        model.share_decoder(source)?;
        model.decoder_frozen = config.freeze_decoder;
    }

    let params = model.trainable_params();
    let mut adam = AdamState::new(&params);
    let mut batch_iter = batches(ds, config.batch_size, config.seed);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(STREAM_LABEL_SHUFFLE);

    let mut trace = TrainTrace::default();
    for iteration in 0..config.iterations {
        let (images, labels) = batch_iter.next().expect("non-empty dataset");

        let latent = model.encoder.encode(&images)?;
        let recon = model.decoder.decode(&latent)?;
        let r = recon_loss(&images, &recon, config.recon)?;

        let use_classifier = with_classifier && config.lambda_cls > 0.0;
        let (loss, cls_value) = if use_classifier {
            let labels = if config.shuffle_labels {
                shuffle_labels(&labels, &mut shuffle_rng)
            } else {
                labels
            };
            let classifier = model.classifier.as_ref().expect("semantic model");
            let c = cls_loss(&classifier.classify(&latent)?, &labels)?;
            (total_loss(&r, &c, config.lambda_cls)?, c.item())
        } else {
            (r.clone(), 0.0)
        };

        model.zero_grad();
        loss.backward()?;
        let lr = lr_schedule(iteration, config.base_lr, config.decay, config.decay_interval);
        adam_step(&params, &mut adam, lr)?;

        if iteration % config.eval_interval == 0 || iteration + 1 == config.iterations {
            trace.records.push(TraceRecord {
                iteration,
                recon_loss: r.item(),
                cls_loss: cls_value,
                total_loss: loss.item(),
                lr,
            });
        }
    }

    Ok(TrainResult { model, trace })
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

const EVAL_CHUNK: usize = 256;

/// Mean squared reconstruction error over a dataset, accumulated in f64.
pub fn mean_reconstruction_error(model: &Model, ds: &Dataset) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let indices: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.len())).collect();
        let (images, _) = ds.gather(&indices);
        let recon = model.reconstruct(&images)?;
        let x = images.data();
        let y = recon.data();
        for (a, b) in x.iter().zip(y.iter()) {
            let d = (*a as f64) - (*b as f64);
            total += d * d;
        }
        count += images.len();
    }
    Ok(total / count as f64)
}

/// Fraction of samples whose latent-classifier argmax matches the label.
pub fn classifier_accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    let classifier = model.classifier.as_ref().ok_or_else(|| {
        TrainError::Config("model has no classifier branch to evaluate".into())
    })?;
    let mut hits = 0usize;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let indices: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.len())).collect();
        let (images, labels) = ds.gather(&indices);
        let logits = classifier.classify(&model.encoder.encode(&images)?)?;
        let c = logits.shape()[1];
        let data = logits.data();
        for (i, &label) in labels.iter().enumerate() {
            let row = &data[i * c..(i + 1) * c];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("non-empty row");
            hits += (argmax == label) as usize;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}
