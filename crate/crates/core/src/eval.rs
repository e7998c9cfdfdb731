//! Image-quality metrics: PSNR and SSIM over reconstructed batches.
//!
//! All arithmetic runs in f64 regardless of the model's precision so the
//! closed-form examples (e.g. MSE 0.01 → exactly 20 dB) hold tightly.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("image {height}×{width} is smaller than the {window}×{window} SSIM window")]
    WindowTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("empty batch: no images to score")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// Mean squared difference between two equally sized pixel buffers.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::ShapeMismatch {
            a: vec![a.len()],
            b: vec![b.len()],
        });
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(max²/mse)`; identical images (mse = 0) map to `f64::INFINITY`,
/// which report aggregation treats as a sentinel rather than averaging it.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB. `max_val` is the dynamic range (1.0
/// for normalized images).
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(EvalError::InvalidArgument(format!(
            "max_val must be positive, got {max_val}"
        )));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_L: f64 = 1.0;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            w.push((-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Structural similarity of two images stored as `height×width×channels`
/// row-major buffers. Uses the canonical 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1.0; windows are taken fully inside
/// the image (no padding). Multi-channel images score each channel
/// separately and average.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, channels: usize) -> Result<f64> {
    let expect = height * width * channels;
    if channels == 0 || a.len() != expect || b.len() != expect {
        return Err(EvalError::ShapeMismatch {
            a: vec![a.len()],
            b: vec![b.len()],
        });
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(EvalError::WindowTooSmall {
            height,
            width,
            window: SSIM_WINDOW,
        });
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let mut channel_sum = 0.0;
    for ch in 0..channels {
        let at = |y: usize, x: usize, img: &[f64]| img[(y * width + x) * channels + ch];
        let mut map_sum = 0.0;
        let mut map_count = 0usize;
        for y0 in 0..=height - SSIM_WINDOW {
            for x0 in 0..=width - SSIM_WINDOW {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let w = window[i * SSIM_WINDOW + j];
                        let va = at(y0 + i, x0 + j, a);
                        let vb = at(y0 + i, x0 + j, b);
                        ma += w * va;
                        mb += w * vb;
                        maa += w * va * va;
                        mbb += w * vb * vb;
                        mab += w * va * vb;
                    }
                }
                let var_a = maa - ma * ma;
                let var_b = mbb - mb * mb;
                let cov = mab - ma * mb;
                let value = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                map_sum += value;
                map_count += 1;
            }
        }
        channel_sum += map_sum / map_count as f64;
    }
    Ok(channel_sum / channels as f64)
}

// ---------------------------------------------------------------------------
// Batch reports
// ---------------------------------------------------------------------------

/// Per-image PSNR/SSIM for a batch plus aggregate means. Infinite PSNR
/// entries (bit-identical pairs) are kept in the per-image list but
/// excluded from the mean, with the exclusion counted.
#[derive(Debug, Clone)]
pub struct QualityReport {
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_ssim_percent: f64,
    pub finite_psnr_count: usize,
    pub infinite_psnr_count: usize,
}

impl QualityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,psnr_db,ssim\n");
        for (i, (p, s)) in self.psnr_db.iter().zip(&self.ssim).enumerate() {
            out.push_str(&format!("{i},{p},{s}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

fn image_f64(batch: &Tensor<f32>, index: usize) -> Vec<f64> {
    let per = batch.len() / batch.shape()[0];
    batch.data()[index * per..(index + 1) * per]
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// Score every reconstruction in a batch against its original. Both
/// tensors are `[n, height, width, channels]` with identical shapes.
pub fn quality_report(
    originals: &Tensor<f32>,
    reconstructions: &Tensor<f32>,
) -> Result<QualityReport> {
    if originals.shape() != reconstructions.shape() || originals.shape().len() != 4 {
        return Err(EvalError::ShapeMismatch {
            a: originals.shape().to_vec(),
            b: reconstructions.shape().to_vec(),
        });
    }
    let [n, h, w, c] = [
        originals.shape()[0],
        originals.shape()[1],
        originals.shape()[2],
        originals.shape()[3],
    ];
    if n == 0 {
        return Err(EvalError::EmptyBatch);
    }
    let mut psnr_db = Vec::with_capacity(n);
    let mut ssim_values = Vec::with_capacity(n);
    for i in 0..n {
        let a = image_f64(originals, i);
        let b = image_f64(reconstructions, i);
        psnr_db.push(psnr(&a, &b, 1.0)?);
        ssim_values.push(ssim(&a, &b, h, w, c)?);
    }
    let finite: Vec<f64> = psnr_db.iter().copied().filter(|v| v.is_finite()).collect();
    let infinite_psnr_count = n - finite.len();
    let mean_psnr_db = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let mean_ssim = ssim_values.iter().sum::<f64>() / n as f64;
    Ok(QualityReport {
        psnr_db,
        ssim: ssim_values,
        mean_psnr_db,
        mean_ssim,
        mean_ssim_percent: 100.0 * mean_ssim,
        finite_psnr_count: finite.len(),
        infinite_psnr_count,
    })
}
