//! The encoder / decoder / classifier networks and their assembly.
//!
//! Layer layout (5×5 convs, 2×2 pools, stride-2 transposed convs, sigmoid
//! bottleneck and output) is fixed; only the input geometry and class count
//! vary. The classifier reads the latent code, never the image, so class
//! information reaches the latent space only through the shared encoder.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};

use crate::tensor::{
    conv2d, conv2d_transpose, linear, maxpool2d, relu, reshape, sigmoid, Padding, Result, Tensor,
    TensorError,
};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

/// Input geometry and class count; everything else about the architecture
/// is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl ArchConfig {
    /// 28×28 grayscale, ten classes.
    pub fn mnist() -> Self {
        ArchConfig {
            height: 28,
            width: 28,
            channels: 1,
            num_classes: 10,
        }
    }

    /// One 32×32 CIFAR channel, two kept classes.
    pub fn cifar_channel(num_classes: usize) -> Self {
        ArchConfig {
            height: 32,
            width: 32,
            channels: 1,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "ArchConfig",
                msg: format!(
                    "spatial extents must be divisible by 4 (two 2×2 pools), got {}×{}",
                    self.height, self.width
                ),
            });
        }
        if self.channels == 0 {
            return Err(TensorError::InvalidArgument {
                op: "ArchConfig",
                msg: "channel count must be positive".into(),
            });
        }
        Ok(())
    }

    /// Bottleneck width: (H/4)·(W/4)·4 — 196 for 28×28, 256 for 32×32.
    pub fn latent_dim(&self) -> usize {
        (self.height / 4) * (self.width / 4) * 4
    }

    /// Flattened size after the second pool: (H/4)·(W/4)·64.
    fn encoder_flat_dim(&self) -> usize {
        (self.height / 4) * (self.width / 4) * 64
    }

    /// Flattened size after the classifier conv: (H/4)·(W/4)·32.
    fn classifier_flat_dim(&self) -> usize {
        (self.height / 4) * (self.width / 4) * 32
    }
}

/// Truncated normal: resample anything beyond two standard deviations.
fn truncated_normal(rng: &mut ChaCha20Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("std is positive");
    (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

const INIT_STD: f32 = 0.1;

fn kernel_param(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(truncated_normal(rng, n, INIT_STD), shape).expect("length matches shape")
}

fn zero_bias(n: usize) -> Tensor {
    Tensor::param(vec![0.0; n], &[n]).expect("length matches shape")
}

/// conv 5×5/32 → pool → conv 5×5/64 → pool → flatten → linear → sigmoid.
#[derive(Debug)]
pub struct EncoderNet {
    arch: ArchConfig,
    conv1_k: Tensor,
    conv1_b: Tensor,
    conv2_k: Tensor,
    conv2_b: Tensor,
    fc_w: Tensor,
    fc_b: Tensor,
}

impl EncoderNet {
    fn init(arch: ArchConfig, rng: &mut ChaCha20Rng) -> Self {
        EncoderNet {
            arch,
            conv1_k: kernel_param(rng, &[5, 5, arch.channels, 32]),
            conv1_b: zero_bias(32),
            conv2_k: kernel_param(rng, &[5, 5, 32, 64]),
            conv2_b: zero_bias(64),
            fc_w: kernel_param(rng, &[arch.encoder_flat_dim(), arch.latent_dim()]),
            fc_b: zero_bias(arch.latent_dim()),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    /// Map an NHWC batch to sigmoid-bounded latent codes, one row per image.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let want = [self.arch.height, self.arch.width, self.arch.channels];
        if batch.shape().len() != 4 || batch.shape()[1..] != want {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: batch.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let h = relu(&conv2d(batch, &self.conv1_k, &self.conv1_b, 1, Padding::Same)?);
        let h = maxpool2d(&h, 2, 2)?;
        let h = relu(&conv2d(&h, &self.conv2_k, &self.conv2_b, 1, Padding::Same)?);
        let h = maxpool2d(&h, 2, 2)?;
        let h = reshape(&h, &[batch.shape()[0], self.arch.encoder_flat_dim()])?;
        Ok(sigmoid(&linear(&h, &self.fc_w, &self.fc_b)?))
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.conv1_k.clone(),
            self.conv1_b.clone(),
            self.conv2_k.clone(),
            self.conv2_b.clone(),
            self.fc_w.clone(),
            self.fc_b.clone(),
        ]
    }

    fn named_params(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("encoder.conv1.kernel", self.conv1_k.clone()),
            ("encoder.conv1.bias", self.conv1_b.clone()),
            ("encoder.conv2.kernel", self.conv2_k.clone()),
            ("encoder.conv2.bias", self.conv2_b.clone()),
            ("encoder.fc.weight", self.fc_w.clone()),
            ("encoder.fc.bias", self.fc_b.clone()),
        ]
    }
}

/// reshape → transposed conv 5×5/64 → transposed conv 5×5/32 → 1×1 conv →
/// sigmoid, inverting the encoder's downsampling.
#[derive(Debug)]
pub struct DecoderNet {
    arch: ArchConfig,
    deconv1_k: Tensor,
    deconv1_b: Tensor,
    deconv2_k: Tensor,
    deconv2_b: Tensor,
    out_k: Tensor,
    out_b: Tensor,
}

impl DecoderNet {
    fn init(arch: ArchConfig, rng: &mut ChaCha20Rng) -> Self {
        DecoderNet {
            arch,
            // Transposed-conv kernels are laid out KhKwCinCout for the
            // matching forward conv: Cin is the layer's *output* channels.
            deconv1_k: kernel_param(rng, &[5, 5, 64, 4]),
            deconv1_b: zero_bias(64),
            deconv2_k: kernel_param(rng, &[5, 5, 32, 64]),
            deconv2_b: zero_bias(32),
            out_k: kernel_param(rng, &[1, 1, 32, arch.channels]),
            out_b: zero_bias(arch.channels),
        }
    }

    /// Map latent rows back to an NHWC batch in (0,1).
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let want = [latent.shape().first().copied().unwrap_or(0), self.arch.latent_dim()];
        if latent.shape() != want {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: latent.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let n = latent.shape()[0];
        let d = reshape(latent, &[n, self.arch.height / 4, self.arch.width / 4, 4])?;
        let d = relu(&conv2d_transpose(&d, &self.deconv1_k, &self.deconv1_b, 2)?);
        let d = relu(&conv2d_transpose(&d, &self.deconv2_k, &self.deconv2_b, 2)?);
        Ok(sigmoid(&conv2d(&d, &self.out_k, &self.out_b, 1, Padding::Same)?))
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.deconv1_k.clone(),
            self.deconv1_b.clone(),
            self.deconv2_k.clone(),
            self.deconv2_b.clone(),
            self.out_k.clone(),
            self.out_b.clone(),
        ]
    }

    fn named_params(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("decoder.deconv1.kernel", self.deconv1_k.clone()),
            ("decoder.deconv1.bias", self.deconv1_b.clone()),
            ("decoder.deconv2.kernel", self.deconv2_k.clone()),
            ("decoder.deconv2.bias", self.deconv2_b.clone()),
            ("decoder.out.kernel", self.out_k.clone()),
            ("decoder.out.bias", self.out_b.clone()),
        ]
    }
}

/// reshape → conv 3×3/32 → flatten → linear 256 → linear #classes.
/// Emits raw logits; softmax lives in the loss.
#[derive(Debug)]
pub struct ClassifierNet {
    arch: ArchConfig,
    conv_k: Tensor,
    conv_b: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
}

impl ClassifierNet {
    fn init(arch: ArchConfig, rng: &mut ChaCha20Rng) -> Self {
        ClassifierNet {
            arch,
            conv_k: kernel_param(rng, &[3, 3, 4, 32]),
            conv_b: zero_bias(32),
            fc1_w: kernel_param(rng, &[arch.classifier_flat_dim(), 256]),
            fc1_b: zero_bias(256),
            fc2_w: kernel_param(rng, &[256, arch.num_classes]),
            fc2_b: zero_bias(arch.num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn classify(&self, latent: &Tensor) -> Result<Tensor> {
        let n = latent.shape().first().copied().unwrap_or(0);
        if latent.shape() != [n, self.arch.latent_dim()] {
            return Err(TensorError::ShapeMismatch {
                op: "classify",
                lhs: latent.shape().to_vec(),
                rhs: vec![n, self.arch.latent_dim()],
            });
        }
        let h = reshape(latent, &[n, self.arch.height / 4, self.arch.width / 4, 4])?;
        let h = relu(&conv2d(&h, &self.conv_k, &self.conv_b, 1, Padding::Same)?);
        let h = reshape(&h, &[n, self.arch.classifier_flat_dim()])?;
        let h = relu(&linear(&h, &self.fc1_w, &self.fc1_b)?);
        linear(&h, &self.fc2_w, &self.fc2_b)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.conv_k.clone(),
            self.conv_b.clone(),
            self.fc1_w.clone(),
            self.fc1_b.clone(),
            self.fc2_w.clone(),
            self.fc2_b.clone(),
        ]
    }

    fn named_params(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("classifier.conv.kernel", self.conv_k.clone()),
            ("classifier.conv.bias", self.conv_b.clone()),
            ("classifier.fc1.weight", self.fc1_w.clone()),
            ("classifier.fc1.bias", self.fc1_b.clone()),
            ("classifier.fc2.weight", self.fc2_w.clone()),
            ("classifier.fc2.bias", self.fc2_b.clone()),
        ]
    }
}

/// Encoder + decoder, with the latent classifier present only on the
/// semantic variant.
#[derive(Debug)]
pub struct Model {
    pub arch: ArchConfig,
    pub encoder: EncoderNet,
    pub decoder: DecoderNet,
    pub classifier: Option<ClassifierNet>,
    /// Frozen decoders keep their weights out of the optimizer entirely.
    pub decoder_frozen: bool,
}

// Fixed RNG streams so that, e.g., adding a classifier cannot perturb the
// encoder/decoder draws for the same seed.
const STREAM_ENCODER: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_CLASSIFIER: u64 = 3;

impl Model {
    /// Seeded initialization. Each sub-net draws from its own RNG stream,
    /// so vanilla and semantic models share encoder/decoder initial weights
    /// for the same seed.
    pub fn init(arch: ArchConfig, seed: u64, with_classifier: bool) -> Result<Self> {
        arch.validate()?;
        let sub_rng = |stream: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        Ok(Model {
            arch,
            encoder: EncoderNet::init(arch, &mut sub_rng(STREAM_ENCODER)),
            decoder: DecoderNet::init(arch, &mut sub_rng(STREAM_DECODER)),
            classifier: with_classifier
                .then(|| ClassifierNet::init(arch, &mut sub_rng(STREAM_CLASSIFIER))),
            decoder_frozen: false,
        })
    }

    /// x̂ = decode(encode(x)).
    pub fn reconstruct(&self, batch: &Tensor) -> Result<Tensor> {
        self.decoder.decode(&self.encoder.encode(batch)?)
    }

    /// Parameters the optimizer may update, in a fixed order.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut params = self.encoder.params();
        if !self.decoder_frozen {
            params.extend(self.decoder.params());
        }
        if let Some(c) = &self.classifier {
            params.extend(c.params());
        }
        params
    }

    /// Every parameter, trainable or not.
    pub fn all_params(&self) -> Vec<Tensor> {
        let mut params = self.encoder.params();
        params.extend(self.decoder.params());
        if let Some(c) = &self.classifier {
            params.extend(c.params());
        }
        params
    }

    pub(crate) fn named_params(&self) -> Vec<(&'static str, Tensor)> {
        let mut params = self.encoder.named_params();
        params.extend(self.decoder.named_params());
        if let Some(c) = &self.classifier {
            params.extend(c.named_params());
        }
        params
    }

    pub fn zero_grad(&self) {
        for p in self.all_params() {
            p.zero_grad();
        }
    }

    /// Copy `source`'s decoder weights into this model bit-exactly and
    /// freeze the decoder, so a later training run reuses them unmodified.
    pub fn share_decoder(&mut self, source: &Model) -> Result<()> {
        // Parameter shapes alone cannot distinguish decoders for different
        // image geometries (the kernels match; only the reshape differs).
        let geom = |a: &ArchConfig| vec![a.height, a.width, a.channels];
        if geom(&source.arch) != geom(&self.arch) {
            return Err(TensorError::ShapeMismatch {
                op: "share_decoder",
                lhs: geom(&source.arch),
                rhs: geom(&self.arch),
            });
        }
        let src = source.decoder.params();
        let dst = self.decoder.params();
        for (s, d) in src.iter().zip(&dst) {
            if s.shape() != d.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "share_decoder",
                    lhs: s.shape().to_vec(),
                    rhs: d.shape().to_vec(),
                });
            }
        }
        for (s, d) in src.iter().zip(&dst) {
            d.data_mut().copy_from_slice(&s.data());
        }
        self.decoder_frozen = true;
        Ok(())
    }
}
