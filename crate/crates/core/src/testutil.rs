//! Shared fixtures for unit tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::Dataset;
use crate::tensor::Tensor;

/// Two visually distinct 8×8 classes: bright top half vs bright bottom
/// half, with mild per-sample noise. Small enough to train in a fraction
/// of a second, separable enough that classifiers and clusterings succeed.
pub fn tiny_dataset(n: usize, seed: u64) -> Dataset {
    let (h, w) = (8, 8);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        labels.push(label);
        for y in 0..h {
            for _ in 0..w {
                let bright = (label == 0) == (y < h / 2);
                let base = if bright { 0.8 } else { 0.2 };
                pixels.push((base + rng.gen_range(-0.1..0.1) as f32).clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(
        Tensor::from_vec(pixels, &[n, h, w, 1]).unwrap(),
        labels,
        vec!["top".into(), "bottom".into()],
        "tiny",
    )
    .unwrap()
}
