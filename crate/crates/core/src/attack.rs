//! Label-shuffle adversarial construction and latent-space diagnostics.
//!
//! The attack adds the difference between two reconstructions of the same
//! image — one from a shuffled-label semantic autoencoder, one from the
//! vanilla autoencoder sharing its decoder — onto the original:
//! `I_a = I + I_s − I_v`. Because both autoencoders reconstruct well, the
//! perturbation is small, yet the vanilla encoder maps `I_a` near the
//! corrupted code rather than the clean one.

use thiserror::Error;

use crate::nets::Model;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("image batches have different shapes: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("class {class} has only {count} sample(s); silhouette needs at least 2")]
    ClassTooSmall { class: usize, count: usize },
    #[error("only one class present; between-class statistics are undefined")]
    SingleClass,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

// ---------------------------------------------------------------------------
// Adversarial construction
// ---------------------------------------------------------------------------

/// An attacked batch: originals, the two reconstructions, the adversarial
/// images, and the raw perturbation that was added.
///
/// Everything is held in double precision. The pipeline's images are `f32`,
/// so widening is exact, and sums and differences of widened pixel values
/// are exact in `f64`; constructing the batch at that precision makes the
/// defining identity `adversarial − original == shuffled_recon −
/// vanilla_recon` hold bit-for-bit when clamping is off. (Had the sum been
/// rounded back to `f32`, the identity would break on roughly half of all
/// pixels.) Consumers that need `f32` — the encoder, image writers —
/// narrow once at their boundary.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub original: Tensor<f64>,
    pub vanilla_recon: Tensor<f64>,
    pub shuffled_recon: Tensor<f64>,
    pub adversarial: Tensor<f64>,
    /// `shuffled_recon − vanilla_recon`, exactly as added to the original
    /// (before any clamping).
    pub perturbation: Tensor<f64>,
    /// Share of pixels clipped by the `[0,1]` clamp; 0 when clamping is
    /// disabled.
    pub clip_fraction: f64,
}

/// Build adversarial images `original + shuffled_recon − vanilla_recon`.
///
/// With `clamp` the result is clipped to the valid pixel range `[0,1]` and
/// the clipped share recorded; without it the pure formula is kept, so
/// `adversarial − original` reproduces the perturbation exactly.
pub fn make_adversarial(
    original: &Tensor<f32>,
    vanilla_recon: &Tensor<f32>,
    shuffled_recon: &Tensor<f32>,
    clamp: bool,
) -> Result<AdversarialBatch> {
    for other in [vanilla_recon, shuffled_recon] {
        if other.shape() != original.shape() {
            return Err(AttackError::ShapeMismatch {
                a: original.shape().to_vec(),
                b: other.shape().to_vec(),
            });
        }
    }
    let original = original.widen();
    let vanilla_recon = vanilla_recon.widen();
    let shuffled_recon = shuffled_recon.widen();
    let perturbation: Vec<f64> = shuffled_recon
        .data()
        .iter()
        .zip(vanilla_recon.data().iter())
        .map(|(s, v)| s - v)
        .collect();
    let mut clipped = 0usize;
    let adversarial: Vec<f64> = original
        .data()
        .iter()
        .zip(&perturbation)
        .map(|(x, d)| {
            let raw = x + d;
            if clamp {
                let c = raw.clamp(0.0, 1.0);
                clipped += (c != raw) as usize;
                c
            } else {
                raw
            }
        })
        .collect();
    let clip_fraction = clipped as f64 / adversarial.len() as f64;
    let shape = original.shape().to_vec();
    Ok(AdversarialBatch {
        original,
        vanilla_recon,
        shuffled_recon,
        adversarial: Tensor::from_vec(adversarial, &shape)?,
        perturbation: Tensor::from_vec(perturbation, &shape)?,
        clip_fraction,
    })
}

// ---------------------------------------------------------------------------
// Cluster statistics
// ---------------------------------------------------------------------------

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_labels(n: usize, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    if labels.len() != n || n == 0 {
        return Err(AttackError::InvalidArgument(format!(
            "{} labels for {} samples",
            labels.len(),
            n
        )));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members.retain(|m| !m.is_empty());
    if members.len() < 2 {
        return Err(AttackError::SingleClass);
    }
    Ok(members)
}

/// Mean silhouette coefficient with Euclidean distance: per point,
/// `(b − a) / max(a, b)` where `a` is the mean distance to its own class
/// and `b` the mean distance to the nearest other class. Points whose
/// `max(a, b)` is zero (fully degenerate geometry) score 0 by convention.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let members = check_labels(points.len(), labels)?;
    for m in &members {
        if m.len() < 2 {
            return Err(AttackError::ClassTooSmall {
                class: labels[m[0]],
                count: m.len(),
            });
        }
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut own = 0.0;
        let mut nearest_other = f64::INFINITY;
        for m in &members {
            let mine = m.contains(&i);
            let mut sum = 0.0;
            for &j in m {
                if j != i {
                    sum += euclid(p, &points[j]);
                }
            }
            if mine {
                own = sum / (m.len() - 1) as f64;
            } else {
                nearest_other = nearest_other.min(sum / m.len() as f64);
            }
        }
        let denom = own.max(nearest_other);
        total += if denom == 0.0 {
            0.0
        } else {
            (nearest_other - own) / denom
        };
    }
    Ok(total / points.len() as f64)
}

/// Spread statistics of a labelled point cloud.
#[derive(Debug, Clone)]
pub struct DispersionStats {
    /// Mean vector per class, in ascending label order of the classes
    /// present.
    pub class_centroids: Vec<Vec<f64>>,
    /// Mean squared distance of each sample to its own class centroid.
    pub intra_class_variance: f64,
    /// Mean pairwise distance between class centroids.
    pub mean_inter_centroid_distance: f64,
    /// Euclidean silhouette of the labelled cloud.
    pub silhouette: f64,
}

fn rows_f64(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    let dim = t.len() / n.max(1);
    let data = t.data();
    (0..n)
        .map(|i| data[i * dim..(i + 1) * dim].iter().map(|&v| v as f64).collect())
        .collect()
}

/// Per-class centroids, intra-class variance, inter-centroid spacing and
/// silhouette for a batch of latent codes (rows of `latents`).
pub fn dispersion(latents: &Tensor<f32>, labels: &[usize]) -> Result<DispersionStats> {
    let points = rows_f64(latents);
    dispersion_of_points(&points, labels)
}

pub fn dispersion_of_points(points: &[Vec<f64>], labels: &[usize]) -> Result<DispersionStats> {
    let members = check_labels(points.len(), labels)?;
    let dim = points[0].len();
    let mut centroids = Vec::with_capacity(members.len());
    for m in &members {
        let mut c = vec![0.0; dim];
        for &i in m {
            for (acc, v) in c.iter_mut().zip(&points[i]) {
                *acc += v;
            }
        }
        for v in &mut c {
            *v /= m.len() as f64;
        }
        centroids.push(c);
    }
    let mut intra = 0.0;
    for (m, c) in members.iter().zip(&centroids) {
        for &i in m {
            let d = euclid(&points[i], c);
            intra += d * d;
        }
    }
    intra /= points.len() as f64;

    let mut inter = 0.0;
    let mut pairs = 0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += euclid(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;

    Ok(DispersionStats {
        class_centroids: centroids,
        intra_class_variance: intra,
        mean_inter_centroid_distance: inter,
        silhouette: silhouette_score(points, labels)?,
    })
}

// ---------------------------------------------------------------------------
// Latent-shift measurement
// ---------------------------------------------------------------------------

/// Where the vanilla encoder sends adversarial images, relative to the
/// clean code `L_v = e_v(I)` and the corrupted code `L_s = e_s(I)`.
#[derive(Debug, Clone)]
pub struct LatentShiftReport {
    pub dist_to_shuffled: Vec<f64>,
    pub dist_to_vanilla: Vec<f64>,
    pub dist_shuffled_vanilla: Vec<f64>,
    pub mean_dist_to_shuffled: f64,
    pub mean_dist_to_vanilla: f64,
    pub mean_dist_shuffled_vanilla: f64,
    /// Fraction of samples whose attacked code lands strictly nearer the
    /// corrupted code than the clean one.
    pub claim_fraction: f64,
    pub clean_dispersion: DispersionStats,
    pub adversarial_dispersion: DispersionStats,
    pub clip_fraction: f64,
}

impl LatentShiftReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("index,dist_to_shuffled,dist_to_vanilla,dist_shuffled_vanilla\n");
        for i in 0..self.dist_to_shuffled.len() {
            out.push_str(&format!(
                "{i},{},{},{}\n",
                self.dist_to_shuffled[i], self.dist_to_vanilla[i], self.dist_shuffled_vanilla[i]
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "latent shift over {} samples\n\
             mean ||e_v(I_a) - L_s||: {:.6}\n\
             mean ||e_v(I_a) - L_v||: {:.6}\n\
             mean ||L_s - L_v||:      {:.6}\n\
             nearer-to-corrupted fraction: {:.4}\n\
             clipped pixel fraction: {:.6}\n\
             intra-class variance (clean):       {:.6}\n\
             intra-class variance (adversarial): {:.6}\n\
             silhouette (clean):       {:.4}\n\
             silhouette (adversarial): {:.4}\n",
            self.dist_to_shuffled.len(),
            self.mean_dist_to_shuffled,
            self.mean_dist_to_vanilla,
            self.mean_dist_shuffled_vanilla,
            self.claim_fraction,
            self.clip_fraction,
            self.clean_dispersion.intra_class_variance,
            self.adversarial_dispersion.intra_class_variance,
            self.clean_dispersion.silhouette,
            self.adversarial_dispersion.silhouette,
        )
    }
}

/// Run the full attack pipeline on a labelled batch and measure the latent
/// shift: encode with both models, reconstruct, build adversarial images,
/// re-encode them with the vanilla encoder, and compare distances.
pub fn latent_shift(
    vanilla: &Model,
    shuffled: &Model,
    images: &Tensor<f32>,
    labels: &[usize],
    clamp: bool,
) -> Result<LatentShiftReport> {
    if vanilla.arch != shuffled.arch {
        return Err(AttackError::InvalidArgument(
            "vanilla and shuffled models have different architectures".into(),
        ));
    }
    if images.shape().len() != 4 || images.shape()[0] != labels.len() || labels.is_empty() {
        return Err(AttackError::InvalidArgument(format!(
            "batch shape {:?} does not match {} labels",
            images.shape(),
            labels.len()
        )));
    }

    let latent_v = vanilla.encoder.encode(images)?;
    let latent_s = shuffled.encoder.encode(images)?;
    let recon_v = vanilla.decoder.decode(&latent_v)?;
    let recon_s = shuffled.decoder.decode(&latent_s)?;
    let batch = make_adversarial(images, &recon_v, &recon_s, clamp)?;
    let latent_a = vanilla.encoder.encode(&batch.adversarial.narrow())?;

    latent_shift_from_points(
        &rows_f64(&latent_v),
        &rows_f64(&latent_s),
        &rows_f64(&latent_a),
        labels,
        batch.clip_fraction,
    )
}

/// Assemble a shift report from already-computed latent point sets:
/// clean vanilla codes `L_v`, corrupted codes `L_s`, and the vanilla
/// encodings of the adversarial images.
pub fn latent_shift_from_points(
    rows_v: &[Vec<f64>],
    rows_s: &[Vec<f64>],
    rows_a: &[Vec<f64>],
    labels: &[usize],
    clip_fraction: f64,
) -> Result<LatentShiftReport> {
    let n = labels.len();
    if rows_v.len() != n || rows_s.len() != n || rows_a.len() != n || n == 0 {
        return Err(AttackError::InvalidArgument(format!(
            "latent sets of {}/{}/{} rows do not match {} labels",
            rows_v.len(),
            rows_s.len(),
            rows_a.len(),
            n
        )));
    }
    let mut dist_to_shuffled = Vec::with_capacity(n);
    let mut dist_to_vanilla = Vec::with_capacity(n);
    let mut dist_shuffled_vanilla = Vec::with_capacity(n);
    let mut nearer = 0usize;
    for i in 0..n {
        let ds = euclid(&rows_a[i], &rows_s[i]);
        let dv = euclid(&rows_a[i], &rows_v[i]);
        nearer += (ds < dv) as usize;
        dist_to_shuffled.push(ds);
        dist_to_vanilla.push(dv);
        dist_shuffled_vanilla.push(euclid(&rows_s[i], &rows_v[i]));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    Ok(LatentShiftReport {
        mean_dist_to_shuffled: mean(&dist_to_shuffled),
        mean_dist_to_vanilla: mean(&dist_to_vanilla),
        mean_dist_shuffled_vanilla: mean(&dist_shuffled_vanilla),
        claim_fraction: nearer as f64 / n as f64,
        dist_to_shuffled,
        dist_to_vanilla,
        dist_shuffled_vanilla,
        clean_dispersion: dispersion_of_points(rows_v, labels)?,
        adversarial_dispersion: dispersion_of_points(rows_a, labels)?,
        clip_fraction,
    })
}
