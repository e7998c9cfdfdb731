//! Exact (O(N²)) t-SNE for visualizing latent codes in 2-D.
//!
//! High-dimensional affinities use Gaussian kernels with per-row bandwidths
//! found by perplexity binary search; the embedding minimizes KL(P‖Q)
//! against Student-t low-dimensional affinities with the canonical recipe:
//! early exaggeration ×12 for 250 iterations, momentum 0.5 → 0.8 at
//! iteration 250, learning rate 200, 1000 iterations, tiny Gaussian init.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TsneError {
    #[error("points {a} and {b} are duplicates (zero distance); perplexity is undefined")]
    DuplicatePoints { a: usize, b: usize },
    #[error("target perplexity {target} exceeds the entropy bound {max} for this row")]
    PerplexityTooHigh { target: f64, max: f64 },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TsneError>;

pub const P_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// High-dimensional affinities
// ---------------------------------------------------------------------------

/// Row of conditional probabilities `p_{j|i} ∝ exp(−d²_ij / 2σ²)` over a
/// row of squared distances. `self_index` marks the diagonal entry, which
/// gets probability 0.
pub fn conditional_p(sq_distances: &[f64], self_index: usize, sigma: f64) -> Vec<f64> {
    let beta = 1.0 / (2.0 * sigma * sigma);
    // Shift by the smallest non-self distance so the largest exponent is 0.
    let min_d = sq_distances
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != self_index)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut row: Vec<f64> = sq_distances
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            if j == self_index {
                0.0
            } else {
                (-(d - min_d) * beta).exp()
            }
        })
        .collect();
    let z: f64 = row.iter().sum();
    for v in &mut row {
        *v /= z;
    }
    row
}

/// Shannon entropy in bits of a probability row (0·log 0 := 0).
fn entropy_bits(row: &[f64]) -> f64 {
    -row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

/// Binary-search the Gaussian bandwidth so the row's perplexity (2^entropy)
/// matches `target` within |log2 error| < 1e-3. Returns the bandwidth and
/// the achieved perplexity.
pub fn search_sigma(
    sq_distances: &[f64],
    self_index: usize,
    target: f64,
) -> Result<(f64, f64)> {
    let n = sq_distances.len();
    let max_perplexity = (n - 1) as f64;
    if target > max_perplexity {
        return Err(TsneError::PerplexityTooHigh {
            target,
            max: max_perplexity,
        });
    }
    if !(target >= 1.0) {
        return Err(TsneError::InvalidArgument(format!(
            "perplexity must be at least 1, got {target}"
        )));
    }
    if let Some(dup) = sq_distances
        .iter()
        .enumerate()
        .find(|&(j, &d)| j != self_index && d == 0.0)
    {
        // Any zero distance means an exact duplicate; if every distance is
        // zero, no bandwidth can hit a non-maximal perplexity, and even one
        // duplicate makes the caller's dedup contract violated.
        if sq_distances
            .iter()
            .enumerate()
            .all(|(j, &d)| j == self_index || d == 0.0)
        {
            return Err(TsneError::DuplicatePoints {
                a: self_index,
                b: dup.0,
            });
        }
    }

    let target_bits = target.log2();
    let achieved = |sigma: f64| entropy_bits(&conditional_p(sq_distances, self_index, sigma));

    // Bracket the target: entropy grows monotonically with sigma.
    let mut lo = 1.0f64;
    let mut hi = 1.0f64;
    let mut expansions = 0;
    while achieved(lo) > target_bits {
        lo /= 2.0;
        expansions += 1;
        if expansions > 1024 {
            break;
        }
    }
    expansions = 0;
    while achieved(hi) < target_bits {
        hi *= 2.0;
        expansions += 1;
        if expansions > 1024 {
            break;
        }
    }
    let mut sigma = (lo + hi) / 2.0;
    for _ in 0..50 {
        sigma = (lo + hi) / 2.0;
        if achieved(sigma) < target_bits {
            lo = sigma;
        } else {
            hi = sigma;
        }
    }
    Ok((sigma, achieved(sigma).exp2()))
}

/// Symmetric joint affinities with per-row perplexity calibration.
#[derive(Debug, Clone)]
pub struct Affinities {
    /// N×N row-major joint probabilities; symmetric, zero diagonal.
    pub p: Vec<f64>,
    pub n: usize,
    pub sigmas: Vec<f64>,
    pub perplexities: Vec<f64>,
}

/// Symmetrize conditional rows into the joint distribution
/// `P = (C + Cᵀ) / 2N`, floored at 1e-12 off the diagonal.
pub fn joint_p(conditional: &[Vec<f64>]) -> Affinities {
    let n = conditional.len();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = (conditional[i][j] + conditional[j][i]) / (2.0 * n as f64);
                p[i * n + j] = v.max(P_FLOOR);
            }
        }
    }
    Affinities {
        p,
        n,
        sigmas: Vec::new(),
        perplexities: Vec::new(),
    }
}

fn pairwise_sq_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dist: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    d
}

/// Build calibrated joint affinities for a point set.
pub fn affinities(points: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    let n = points.len();
    let d = pairwise_sq_distances(points);
    let mut conditional = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    let mut perplexities = Vec::with_capacity(n);
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let (sigma, achieved) = search_sigma(row, i, perplexity)?;
        conditional.push(conditional_p(row, i, sigma));
        sigmas.push(sigma);
        perplexities.push(achieved);
    }
    let mut joint = joint_p(&conditional);
    joint.sigmas = sigmas;
    joint.perplexities = perplexities;
    Ok(joint)
}

// ---------------------------------------------------------------------------
// KL divergence and gradient
// ---------------------------------------------------------------------------

/// Student-t kernel values `1/(1+‖y_i−y_j‖²)` and the normalized Q matrix.
fn q_matrix(y: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    let q: Vec<f64> = num.iter().map(|&v| (v / z).max(P_FLOOR)).collect();
    (num, q)
}

fn kl_of(p: &[f64], q: &[f64], n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                kl += pij * (pij / q[i * n + j]).ln();
            }
        }
    }
    kl
}

fn gradient_of(p: &[f64], q: &[f64], num: &[f64], y: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = y.len();
    let mut grad = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = i * n + j;
            let coeff = 4.0 * (p[k] - q[k]) * num[k];
            grad[i][0] += coeff * (y[i][0] - y[j][0]);
            grad[i][1] += coeff * (y[i][1] - y[j][1]);
        }
    }
    grad
}

/// KL(P‖Q) with Student-t Q(Y), plus its analytic gradient
/// `∂KL/∂y_i = 4 Σ_j (p_ij − q_ij)(y_i − y_j)(1 + ‖y_i − y_j‖²)^{-1}`.
pub fn kl_and_gradient(p: &[f64], y: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>) {
    let n = y.len();
    assert_eq!(p.len(), n * n, "P must be N×N for N points");
    let (num, q) = q_matrix(y);
    (kl_of(p, &q, n), gradient_of(p, &q, &num, y))
}

// ---------------------------------------------------------------------------
// Optimization loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_switch: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_switch: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingResult {
    /// 2-D coordinates, one row per kept input point.
    pub y: Vec<[f64; 2]>,
    /// Original indices of the kept (de-duplicated) points.
    pub indices: Vec<usize>,
    /// Original indices dropped as exact duplicates of earlier points.
    pub dropped: Vec<usize>,
    /// KL divergence against the un-exaggerated P at the start of each
    /// iteration.
    pub kl_trace: Vec<f64>,
    pub config: TsneConfig,
}

/// Remove later occurrences of bit-identical points.
fn dedup_points(points: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::HashMap::new();
    let mut kept = Vec::new();
    let mut indices = Vec::new();
    let mut dropped = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key, i).is_none() {
            kept.push(p.clone());
            indices.push(i);
        } else {
            dropped.push(i);
        }
    }
    (kept, indices, dropped)
}

/// Embed points into 2-D. Exact duplicates are dropped (with a warning on
/// stderr) so bandwidth search stays well-defined; the result records which
/// input rows survived.
pub fn run_tsne(points: &[Vec<f64>], config: &TsneConfig) -> Result<EmbeddingResult> {
    let (kept, indices, dropped) = dedup_points(points);
    if !dropped.is_empty() {
        eprintln!(
            "tsne: dropped {} duplicate point(s) before embedding: {:?}",
            dropped.len(),
            dropped
        );
    }
    let n = kept.len();
    if n < 5 {
        return Err(TsneError::InvalidArgument(format!(
            "need at least 5 distinct points, got {n}"
        )));
    }
    if config.perplexity >= n as f64 {
        return Err(TsneError::PerplexityTooHigh {
            target: config.perplexity,
            max: (n - 1) as f64,
        });
    }

    let aff = affinities(&kept, config.perplexity)?;
    let p = &aff.p;
    let p_exaggerated: Vec<f64> = p.iter().map(|v| v * config.exaggeration).collect();

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(config.iterations);

    for t in 0..config.iterations {
        let (num, q) = q_matrix(&y);
        kl_trace.push(kl_of(p, &q, n));
        let p_now = if t < config.exaggeration_iters {
            &p_exaggerated
        } else {
            p
        };
        let grad = gradient_of(p_now, &q, &num, &y);
        let momentum = if t < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let mut mean = [0.0f64; 2];
        for i in 0..n {
            for c in 0..2 {
                velocity[i][c] = momentum * velocity[i][c] - config.learning_rate * grad[i][c];
                y[i][c] += velocity[i][c];
                mean[c] += y[i][c];
            }
        }
        for i in 0..n {
            for c in 0..2 {
                y[i][c] -= mean[c] / n as f64;
            }
        }
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(TsneError::InvalidArgument(
            "embedding diverged to non-finite coordinates".into(),
        ));
    }

    Ok(EmbeddingResult {
        y,
        indices,
        dropped,
        kl_trace,
        config: config.clone(),
    })
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

/// Rows of a latent batch as f64 points, ready for `run_tsne`.
pub fn latents_as_points(latents: &Tensor<f32>) -> Vec<Vec<f64>> {
    let n = latents.shape()[0];
    let dim = latents.len() / n.max(1);
    let data = latents.data();
    (0..n)
        .map(|i| data[i * dim..(i + 1) * dim].iter().map(|&v| v as f64).collect())
        .collect()
}

/// CSV of embedded coordinates: `id,label,x,y`, ids referring to the
/// original input rows (duplicates omitted).
pub fn embedding_csv(result: &EmbeddingResult, labels: &[usize]) -> String {
    let mut out = String::from("id,label,x,y\n");
    for (row, &id) in result.indices.iter().enumerate() {
        out.push_str(&format!(
            "{id},{},{},{}\n",
            labels[id], result.y[row][0], result.y[row][1]
        ));
    }
    out
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Standalone SVG scatter plot of an embedding, one color per class with a
/// legend.
pub fn embedding_svg(result: &EmbeddingResult, labels: &[usize], class_names: &[String]) -> String {
    let (size, margin) = (800.0, 60.0);
    let xs: Vec<f64> = result.y.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = result.y.iter().map(|p| p[1]).collect();
    let bound = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = bound(&xs);
    let (y0, y1) = bound(&ys);
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (size - 2.0 * margin);
    let sy = |y: f64| size - margin - (y - y0) / (y1 - y0) * (size - 2.0 * margin);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
    );
    for (row, &id) in result.indices.iter().enumerate() {
        let color = PALETTE[labels[id] % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.7\"/>\n",
            sx(result.y[row][0]),
            sy(result.y[row][1]),
        ));
    }
    let mut present: Vec<usize> = result.indices.iter().map(|&id| labels[id]).collect();
    present.sort_unstable();
    present.dedup();
    for (slot, &class) in present.iter().enumerate() {
        let ly = margin + slot as f64 * 22.0;
        let name = class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| class.to_string());
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{ly:.2}\" r=\"5\" fill=\"{}\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"14\">{name}</text>\n",
            size - margin - 110.0,
            PALETTE[class % PALETTE.len()],
            size - margin - 98.0,
            ly + 5.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
