//! Acceptance checks, one line per criterion (run with `-- --nocapture` to
//! see them as they complete).
//!
//! Property criteria run unconditionally. Quantitative criteria that need
//! the real MNIST/CIFAR files (see scripts/fetch_data.sh) are skipped when
//! the files are absent; the hours-long full-scale runs additionally
//! require SAE_ACCEPTANCE_FULL=1. Skipped criteria do not fail the test —
//! they print the reason instead.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sae_core::attack::{latent_shift_from_points, make_adversarial, silhouette_score};
use sae_core::data::{filter_classes, load_cifar10, load_mnist, split_channels, Dataset};
use sae_core::eval::{psnr, psnr_from_mse, quality_report, ssim};
use sae_core::nets::Model;
use sae_core::tensor::{
    conv2d, conv2d_transpose, linear, maxpool2d, mean_all, mul, relu, sigmoid, Padding, Tensor,
};
use sae_core::train::{
    classifier_accuracy, cls_loss, recon_loss, total_loss, train_semantic, train_vanilla,
    ReconLoss, TrainConfig,
};
use sae_core::tsne::{affinities, kl_and_gradient, run_tsne, EmbeddingResult, TsneConfig};

use common::{run, sae, write_idx_pair};

// ---------------------------------------------------------------------------
// Outcome bookkeeping
// ---------------------------------------------------------------------------

struct Outcome {
    line: String,
    failed: bool,
}

struct Tally(Vec<Outcome>);

impl Tally {
    fn check(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        let status = if ok { "PASS" } else { "FAIL" };
        self.push(id, name, status, detail, !ok);
    }

    fn skip(&mut self, id: usize, name: &str, reason: String) {
        self.push(id, name, "SKIP", reason, false);
    }

    fn push(&mut self, id: usize, name: &str, status: &str, detail: String, failed: bool) {
        let line = format!("criterion {id} ({name}): {status} — {detail}");
        println!("{line}");
        self.0.push(Outcome { line, failed });
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

const CHUNK: usize = 256;

/// Run a single-batch model function over a large batch in bounded chunks
/// (autograd buffers for thousands of images would not fit in memory).
fn chunked(images: &Tensor<f32>, f: impl Fn(&Tensor<f32>) -> Tensor<f32>) -> Tensor<f32> {
    let shape = images.shape().to_vec();
    let n = shape[0];
    let per = shape[1..].iter().product::<usize>();
    let data = images.data();
    let mut out = Vec::with_capacity(images.len());
    let mut out_tail: Vec<usize> = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let mut chunk_shape = shape.clone();
        chunk_shape[0] = end - start;
        let chunk = Tensor::from_vec(data[start * per..end * per].to_vec(), &chunk_shape).unwrap();
        let result = f(&chunk);
        out_tail = result.shape()[1..].to_vec();
        out.extend_from_slice(&result.data());
    }
    let mut out_shape = vec![n];
    out_shape.extend(out_tail);
    Tensor::from_vec(out, &out_shape).unwrap()
}

fn split_planes(t: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let (n, h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let data = t.data();
    (0..c)
        .map(|ch| {
            let plane: Vec<f32> = (0..n * h * w).map(|p| data[p * c + ch]).collect();
            Tensor::from_vec(plane, &[n, h, w, 1]).unwrap()
        })
        .collect()
}

fn merge_planes(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let (n, h, w) = (
        parts[0].shape()[0],
        parts[0].shape()[1],
        parts[0].shape()[2],
    );
    let c = parts.len();
    let mut data = vec![0.0f32; n * h * w * c];
    for (ch, part) in parts.iter().enumerate() {
        for (p, &v) in part.data().iter().enumerate() {
            data[p * c + ch] = v;
        }
    }
    Tensor::from_vec(data, &[n, h, w, c]).unwrap()
}

/// Reconstruct a batch with a model, routing each channel plane through a
/// single-channel model when the image has more channels than the model.
fn reconstruct_any(model: &Model, images: &Tensor<f32>) -> Tensor<f32> {
    if model.arch.channels == images.shape()[3] {
        chunked(images, |c| model.reconstruct(c).unwrap())
    } else {
        let parts: Vec<Tensor<f32>> = split_planes(images)
            .iter()
            .map(|p| chunked(p, |c| model.reconstruct(c).unwrap()))
            .collect();
        merge_planes(&parts)
    }
}

/// Latent rows (f64) for a batch, concatenating per-channel codes when the
/// model is single-channel and the batch is not.
fn encode_any(model: &Model, images: &Tensor<f32>) -> Vec<Vec<f64>> {
    let planes: Vec<Tensor<f32>> = if model.arch.channels == images.shape()[3] {
        vec![images.clone()]
    } else {
        split_planes(images)
    };
    let n = images.shape()[0];
    let mut rows = vec![Vec::new(); n];
    for plane in &planes {
        let latent = chunked(plane, |c| model.encoder.encode(c).unwrap());
        let dim = latent.len() / n;
        let data = latent.data();
        for (i, row) in rows.iter_mut().enumerate() {
            row.extend(data[i * dim..(i + 1) * dim].iter().map(|&v| v as f64));
        }
    }
    rows
}

fn mean_quality(model: &Model, ds: &Dataset, limit: usize) -> (f64, f64) {
    let n = if limit == 0 { ds.len() } else { limit.min(ds.len()) };
    let idx: Vec<usize> = (0..n).collect();
    let (images, _) = ds.gather(&idx);
    let recon = reconstruct_any(model, &images);
    let report = quality_report(&images, &recon).unwrap();
    (report.mean_psnr_db, report.mean_ssim_percent)
}

fn embedded_silhouette(result: &EmbeddingResult, labels: &[usize]) -> f64 {
    let coords: Vec<Vec<f64>> = result.y.iter().map(|p| p.to_vec()).collect();
    let kept: Vec<usize> = result.indices.iter().map(|&i| labels[i]).collect();
    silhouette_score(&coords, &kept).unwrap()
}

// ---------------------------------------------------------------------------
// Synthetic datasets (stand-ins when the real files are absent)
// ---------------------------------------------------------------------------

/// 16×16 grayscale, ten classes. The class places a bright 4×4 block in one
/// cell of a 4×4 grid; a dimmer block at a random cell and pixel noise give
/// within-class variation the label does not explain.
fn block_dataset(n: usize, seed: u64) -> Dataset {
    let side = 16;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pixels = vec![0.0f32; n * side * side];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        labels.push(label);
        let img = &mut pixels[i * side * side..(i + 1) * side * side];
        for v in img.iter_mut() {
            *v = 0.12 + rng.gen_range(0.0..0.06);
        }
        let mut paint = |cell: usize, level: f32, jitter: f32, rng: &mut ChaCha20Rng| {
            let (cx, cy) = (cell % 4 * 4, cell / 4 * 4);
            for y in cy..cy + 4 {
                for x in cx..cx + 4 {
                    img[y * side + x] = (level + rng.gen_range(-jitter..jitter)).clamp(0.0, 1.0);
                }
            }
        };
        let distractor = rng.gen_range(0..16);
        let dim_level = rng.gen_range(0.30..0.50f32);
        paint(distractor, dim_level, 0.05, &mut rng);
        let bright = rng.gen_range(0.75..0.95f32);
        paint(label, bright, 0.05, &mut rng);
    }
    Dataset::new(
        Tensor::from_vec(pixels, &[n, side, side, 1]).unwrap(),
        labels,
        (0..10).map(|c| c.to_string()).collect(),
        "synthetic-blocks",
    )
    .unwrap()
}

/// 16×16 RGB, two classes: the red channel is bright in the top half for
/// class 0 and the bottom half for class 1; green carries a random
/// distractor block, blue is noisy gray.
fn rgb_dataset(n: usize, seed: u64) -> Dataset {
    let side = 16;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pixels = vec![0.0f32; n * side * side * 3];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        labels.push(label);
        let dx = rng.gen_range(0..4) * 4;
        let dy = rng.gen_range(0..4) * 4;
        for y in 0..side {
            for x in 0..side {
                let at = ((i * side + y) * side + x) * 3;
                let top = y < side / 2;
                let red: f32 = if (label == 0) == top { 0.8 } else { 0.2 };
                let green: f32 = if (dy..dy + 4).contains(&y) && (dx..dx + 4).contains(&x) {
                    0.7
                } else {
                    0.35
                };
                pixels[at] = (red + rng.gen_range(-0.08..0.08f32)).clamp(0.0, 1.0);
                pixels[at + 1] = (green + rng.gen_range(-0.08..0.08f32)).clamp(0.0, 1.0);
                pixels[at + 2] = (0.5 + rng.gen_range(-0.08..0.08f32)).clamp(0.0, 1.0);
            }
        }
    }
    Dataset::new(
        Tensor::from_vec(pixels, &[n, side, side, 3]).unwrap(),
        labels,
        vec!["zero".into(), "one".into()],
        "synthetic-rgb",
    )
    .unwrap()
}

/// Stack the channel planes of a dataset into one single-channel dataset
/// (labels repeated) — the pooled training protocol.
fn pool(ds: &Dataset) -> Dataset {
    let parts = split_channels(ds);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for part in &parts {
        pixels.extend_from_slice(&part.images().data());
        labels.extend_from_slice(part.labels());
    }
    let n: usize = parts.iter().map(Dataset::len).sum();
    Dataset::new(
        Tensor::from_vec(pixels, &[n, ds.height(), ds.width(), 1]).unwrap(),
        labels,
        ds.class_names().to_vec(),
        format!("{}#pooled", ds.source()),
    )
    .unwrap()
}

fn small_train_config(iterations: u64, lambda: f32, shuffle: bool) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        iterations,
        lambda_cls: lambda,
        shuffle_labels: shuffle,
        eval_interval: 100,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient checks, f64, every layer and loss
// ---------------------------------------------------------------------------

type Init = (Vec<f64>, Vec<usize>);

/// Max relative error between analytic and central-difference gradients of
/// `build`, which must construct a fresh scalar graph from its parameters.
fn fd_max_rel_err(inits: &[Init], build: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>) -> f64 {
    let params: Vec<Tensor<f64>> = inits
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s).unwrap())
        .collect();
    let loss = build(&params);
    loss.backward().unwrap();
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().expect("gradient reaches every parameter"))
        .collect();

    let h = 1e-5;
    let value_at = |pi: usize, k: usize, delta: f64| -> f64 {
        let shifted: Vec<Tensor<f64>> = inits
            .iter()
            .enumerate()
            .map(|(j, (d, s))| {
                let mut d = d.clone();
                if j == pi {
                    d[k] += delta;
                }
                Tensor::param(d, s).unwrap()
            })
            .collect();
        build(&shifted).item()
    };

    let mut worst = 0.0f64;
    for (pi, (data, _)) in inits.iter().enumerate() {
        for k in 0..data.len() {
            let numeric = (value_at(pi, k, h) - value_at(pi, k, -h)) / (2.0 * h);
            let analytic = grads[pi][k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero (ReLU kink) and from each other (pool ties)
/// so finite differences cannot cross a non-smooth point.
fn spread(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.1..1.0) + i as f64 * 1e-3
        })
        .collect()
}

fn squared_mean(t: &Tensor<f64>) -> Tensor<f64> {
    mean_all(&mul(t, t).unwrap())
}

fn gradient_fidelity(seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut check = |inits: &[Init], build: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>| {
        worst = worst.max(fd_max_rel_err(inits, build));
    };

    // conv2d, SAME padding, stride 1
    let inits = [
        (uniform(&mut rng, 50, -1.0, 1.0), vec![1, 5, 5, 2]),
        (uniform(&mut rng, 54, -0.5, 0.5), vec![3, 3, 2, 3]),
        (uniform(&mut rng, 3, -0.3, 0.3), vec![3]),
    ];
    check(&inits, &|p| {
        squared_mean(&conv2d(&p[0], &p[1], &p[2], 1, Padding::Same).unwrap())
    });

    // conv2d, VALID padding, stride 2
    let inits = [
        (uniform(&mut rng, 72, -1.0, 1.0), vec![1, 6, 6, 2]),
        (uniform(&mut rng, 54, -0.5, 0.5), vec![3, 3, 2, 3]),
        (uniform(&mut rng, 3, -0.3, 0.3), vec![3]),
    ];
    check(&inits, &|p| {
        squared_mean(&conv2d(&p[0], &p[1], &p[2], 2, Padding::Valid).unwrap())
    });

    // conv2d_transpose, stride 2 (input channels = kernel Cout)
    let inits = [
        (uniform(&mut rng, 27, -1.0, 1.0), vec![1, 3, 3, 3]),
        (uniform(&mut rng, 54, -0.5, 0.5), vec![3, 3, 2, 3]),
        (uniform(&mut rng, 2, -0.3, 0.3), vec![2]),
    ];
    check(&inits, &|p| {
        squared_mean(&conv2d_transpose(&p[0], &p[1], &p[2], 2).unwrap())
    });

    // maxpool2d 2×2 stride 2
    let inits = [(spread(&mut rng, 32), vec![1, 4, 4, 2])];
    check(&inits, &|p| squared_mean(&maxpool2d(&p[0], 2, 2).unwrap()));

    // linear
    let inits = [
        (uniform(&mut rng, 12, -1.0, 1.0), vec![3, 4]),
        (uniform(&mut rng, 20, -0.5, 0.5), vec![4, 5]),
        (uniform(&mut rng, 5, -0.3, 0.3), vec![5]),
    ];
    check(&inits, &|p| {
        squared_mean(&linear(&p[0], &p[1], &p[2]).unwrap())
    });

    // relu (inputs away from the kink) and sigmoid
    let inits = [(spread(&mut rng, 12), vec![2, 6])];
    check(&inits, &|p| squared_mean(&relu(&p[0])));
    let inits = [(uniform(&mut rng, 12, -2.0, 2.0), vec![2, 6])];
    check(&inits, &|p| squared_mean(&sigmoid(&p[0])));

    // reconstruction losses through a sigmoid head
    let target = uniform(&mut rng, 9, 0.05, 0.95);
    let inits = [(uniform(&mut rng, 9, -1.5, 1.5), vec![1, 3, 3, 1])];
    let t = target.clone();
    check(&inits, &|p| {
        let target = Tensor::from_vec(t.clone(), &[1, 3, 3, 1]).unwrap();
        recon_loss(&target, &sigmoid(&p[0]), ReconLoss::Mse).unwrap()
    });
    check(&inits, &|p| {
        let target = Tensor::from_vec(target.clone(), &[1, 3, 3, 1]).unwrap();
        recon_loss(&target, &sigmoid(&p[0]), ReconLoss::Bce).unwrap()
    });

    // classification loss over logits
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let inits = [(uniform(&mut rng, 20, -2.0, 2.0), vec![4, 5])];
    check(&inits, &|p| cls_loss(&p[0], &labels).unwrap());

    // weighted total of both losses
    let labels2: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
    let target2 = uniform(&mut rng, 8, 0.05, 0.95);
    let inits = [
        (uniform(&mut rng, 8, -1.5, 1.5), vec![2, 2, 2, 1]),
        (uniform(&mut rng, 6, -2.0, 2.0), vec![2, 3]),
    ];
    check(&inits, &|p| {
        let target = Tensor::from_vec(target2.clone(), &[2, 2, 2, 1]).unwrap();
        let r = recon_loss(&target, &sigmoid(&p[0]), ReconLoss::Mse).unwrap();
        let c = cls_loss(&p[1], &labels2).unwrap();
        total_loss(&r, &c, 0.7).unwrap()
    });

    worst
}

// ---------------------------------------------------------------------------
// Criterion 8: an SSIM oracle independent of the eval module
// ---------------------------------------------------------------------------

/// Naive single-channel SSIM: explicit Gaussian window, centered moments,
/// valid positions only.
fn ssim_oracle(a: &[f64], b: &[f64], height: usize, width: usize) -> f64 {
    let (win, sigma) = (11usize, 1.5f64);
    let mut w = vec![0.0f64; win * win];
    let mut total = 0.0;
    for y in 0..win {
        for x in 0..win {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            w[y * win + x] = v;
            total += v;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);

    let mut sum = 0.0;
    let mut count = 0usize;
    for top in 0..=(height - win) {
        for left in 0..=(width - win) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for y in 0..win {
                for x in 0..win {
                    let at = (top + y) * width + left + x;
                    ma += w[y * win + x] * a[at];
                    mb += w[y * win + x] * b[at];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in 0..win {
                for x in 0..win {
                    let at = (top + y) * width + left + x;
                    let (da, db) = (a[at] - ma, b[at] - mb);
                    va += w[y * win + x] * da * da;
                    vb += w[y * win + x] * db * db;
                    cov += w[y * win + x] * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

// ---------------------------------------------------------------------------
// Criterion 9 helpers: spawn the binary twice, compare artifact bytes
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) {
    let (code, _, stderr) = run(sae().args(args));
    assert_eq!(code, 0, "`sae {}` failed: {stderr}", args.join(" "));
}

fn assert_identical(left: &Path, right: &Path, what: &str, diffs: &mut Vec<String>) {
    let a = std::fs::read(left).unwrap_or_default();
    let b = std::fs::read(right).unwrap_or_default();
    if a.is_empty() || a != b {
        diffs.push(what.to_string());
    }
}

// ---------------------------------------------------------------------------
// The criteria
// ---------------------------------------------------------------------------

#[test]
fn criteria() {
    let mut tally = Tally(Vec::new());
    let root = workspace_root();
    let full = std::env::var("SAE_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");

    let mnist_files = [
        "data/mnist/train-images-idx3-ubyte.gz",
        "data/mnist/train-labels-idx1-ubyte.gz",
        "data/mnist/t10k-images-idx3-ubyte.gz",
        "data/mnist/t10k-labels-idx1-ubyte.gz",
    ]
    .map(|p| root.join(p));
    let have_mnist = mnist_files.iter().all(|p| p.exists());
    let cifar_files: Vec<PathBuf> = (1..=5)
        .map(|i| root.join(format!("data/cifar-10-batches-bin/data_batch_{i}.bin")))
        .chain(std::iter::once(
            root.join("data/cifar-10-batches-bin/test_batch.bin"),
        ))
        .collect();
    let have_cifar = cifar_files.iter().all(|p| p.exists());

    // ---- 1: gradient fidelity --------------------------------------------
    {
        let started = Instant::now();
        let seeds = 20;
        let worst = (0..seeds).map(gradient_fidelity).fold(0.0f64, f64::max);
        tally.check(
            1,
            "gradient fidelity",
            worst < 1e-6 && started.elapsed().as_secs() < 60,
            format!(
                "max rel err {worst:.2e} over {seeds} seeds, all layers and losses, {:.1}s",
                started.elapsed().as_secs_f64()
            ),
        );
    }

    // ---- 2: reconstruction quality vs the published table -----------------
    // Full-scale models trained here are reused by criteria 3 and 4.
    let mut real_models: Option<(Model, Model, Dataset)> = None;
    if !have_mnist {
        tally.skip(
            2,
            "Table II reproduction",
            "MNIST files absent under data/mnist (run scripts/fetch_data.sh); \
             the quantitative clause needs the real dataset"
                .into(),
        );
    } else {
        let train_full = load_mnist(&mnist_files[0], &mnist_files[1]).unwrap();
        let test_full = load_mnist(&mnist_files[2], &mnist_files[3]).unwrap();

        // Desk-scale clause: 10k train / 2k iterations reaches 18 dB in 10 min.
        let started = Instant::now();
        let desk = train_vanilla(
            &TrainConfig {
                iterations: 2000,
                ..TrainConfig::default()
            },
            &train_full.take(10_000),
        )
        .unwrap();
        let (desk_psnr, _) = mean_quality(&desk.model, &test_full, 1000);
        let desk_secs = started.elapsed().as_secs_f64();
        let desk_ok = desk_psnr >= 18.0 && desk_secs <= 600.0;

        if !full {
            tally.check(
                2,
                "Table II reproduction",
                desk_ok,
                format!(
                    "desk-scale clause only: PSNR {desk_psnr:.2} dB (≥ 18) in {desk_secs:.0}s \
                     (≤ 600); full runs need SAE_ACCEPTANCE_FULL=1"
                ),
            );
        } else {
            let vanilla = train_vanilla(&TrainConfig::default(), &train_full).unwrap();
            let semantic = train_semantic(&TrainConfig::default(), &train_full, None).unwrap();
            let (v_psnr, v_ssim) = mean_quality(&vanilla.model, &test_full, 0);
            let (s_psnr, s_ssim) = mean_quality(&semantic.model, &test_full, 0);
            let ok = desk_ok
                && (v_psnr - 24.89).abs() <= 2.0
                && (v_ssim - 96.39).abs() <= 3.0
                && (s_psnr - 25.10).abs() <= 2.0
                && (s_ssim - 95.82).abs() <= 3.0;
            tally.check(
                2,
                "Table II reproduction",
                ok,
                format!(
                    "vanilla {v_psnr:.2} dB / {v_ssim:.2}% (want 24.89±2 / 96.39±3), \
                     semantic {s_psnr:.2} dB / {s_ssim:.2}% (want 25.10±2 / 95.82±3), \
                     desk-scale {desk_psnr:.2} dB in {desk_secs:.0}s"
                ),
            );
            real_models = Some((vanilla.model, semantic.model, test_full));
        }
    }

    // ---- 3 & 4: latent separation and classifier sanity --------------------
    {
        let synthetic: Option<(Model, Model)>;
        let test: Dataset;
        let (vanilla, semantic, provenance): (&Model, &Model, &str) = match &real_models {
            Some((v, s, t)) => {
                test = t.clone();
                synthetic = None;
                let _ = &synthetic;
                (v, s, "real MNIST")
            }
            None => {
                // Synthetic stand-in exercising the identical pipeline.
                let train = block_dataset(600, 1);
                test = block_dataset(200, 2);
                let v = train_vanilla(&small_train_config(500, 0.0, false), &train)
                    .unwrap()
                    .model;
                let s = train_semantic(&small_train_config(500, 1.0, false), &train, None)
                    .unwrap()
                    .model;
                synthetic = Some((v, s));
                let pair = synthetic.as_ref().unwrap();
                (&pair.0, &pair.1, "synthetic stand-in, MNIST absent")
            }
        };

        let n = test.len().min(1000);
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = test.gather(&idx);
        let lat_v = encode_any(vanilla, &images);
        let lat_s = encode_any(semantic, &images);
        let raw_v = silhouette_score(&lat_v, &labels).unwrap();
        let raw_s = silhouette_score(&lat_s, &labels).unwrap();

        let tsne_config = TsneConfig {
            perplexity: 20.0,
            seed: 0,
            ..TsneConfig::default()
        };
        let emb_v = embedded_silhouette(&run_tsne(&lat_v, &tsne_config).unwrap(), &labels);
        let emb_s = embedded_silhouette(&run_tsne(&lat_s, &tsne_config).unwrap(), &labels);

        tally.check(
            3,
            "semantic separation",
            raw_s > raw_v && emb_s > emb_v,
            format!(
                "silhouette raw {raw_v:.3} → {raw_s:.3}, t-SNE {emb_v:.3} → {emb_s:.3} \
                 over {n} latents ({provenance})"
            ),
        );

        let chance = 1.0 / test.num_classes() as f64;
        let acc = classifier_accuracy(semantic, &test).unwrap();
        tally.check(
            4,
            "classifier sanity",
            acc >= 5.0 * chance,
            format!(
                "accuracy {acc:.3} vs floor {:.2} (5× chance); 0.90 target {} ({provenance})",
                5.0 * chance,
                if acc >= 0.90 { "met" } else { "not met" },
            ),
        );
    }

    // ---- 5 & 6: attack imperceptibility and latent dispersion shift --------
    {
        let full_cifar = have_cifar && full;
        let (train, test, provenance) = if full_cifar {
            let train = filter_classes(&load_cifar10(&cifar_files[..5]).unwrap(), &[0, 1]).unwrap();
            let test = filter_classes(&load_cifar10(&cifar_files[5..]).unwrap(), &[0, 1]).unwrap();
            (train, test, "real CIFAR-10 two-class")
        } else {
            (rgb_dataset(256, 3), rgb_dataset(128, 4), "synthetic stand-in")
        };
        let pooled = pool(&train);
        let mut vanilla_config =
            small_train_config(if full_cifar { 10_000 } else { 400 }, 0.0, false);
        let mut shuffled_config =
            small_train_config(if full_cifar { 10_000 } else { 400 }, 1.0, true);
        if full_cifar {
            vanilla_config.batch_size = 32;
            shuffled_config.batch_size = 32;
        }
        let vanilla = train_vanilla(&vanilla_config, &pooled).unwrap().model;
        let shuffled = train_semantic(&shuffled_config, &pooled, Some(&vanilla))
            .unwrap()
            .model;

        let idx: Vec<usize> = (0..test.len()).collect();
        let (images, labels) = test.gather(&idx);
        let recon_v = reconstruct_any(&vanilla, &images);
        let recon_s = reconstruct_any(&shuffled, &images);
        let batch = make_adversarial(&images, &recon_v, &recon_s, true).unwrap();
        let adversarial = batch.adversarial.narrow();

        let report = quality_report(&images, &adversarial).unwrap();
        if full_cifar {
            tally.check(
                5,
                "attack imperceptibility",
                (report.mean_psnr_db - 39.93).abs() <= 5.0 && report.mean_ssim >= 0.90,
                format!(
                    "PSNR(I, I_a) {:.2} dB (want 39.93±5), SSIM {:.4} (≥ 0.90) ({provenance})",
                    report.mean_psnr_db, report.mean_ssim
                ),
            );
        } else {
            tally.skip(
                5,
                "attack imperceptibility",
                format!(
                    "needs real CIFAR-10 under data/ and SAE_ACCEPTANCE_FULL=1 (hours of \
                     training); synthetic short-run PSNR(I, I_a) was {:.2} dB",
                    report.mean_psnr_db
                ),
            );
        }

        let lat_clean = encode_any(&vanilla, &images);
        let lat_shuf = encode_any(&shuffled, &images);
        let lat_adv = encode_any(&vanilla, &adversarial);
        let shift = latent_shift_from_points(
            &lat_clean,
            &lat_shuf,
            &lat_adv,
            &labels,
            batch.clip_fraction,
        )
        .unwrap();
        let clean_var = shift.clean_dispersion.intra_class_variance;
        let adv_var = shift.adversarial_dispersion.intra_class_variance;
        if full_cifar {
            tally.check(
                6,
                "latent dispersion shift",
                adv_var > clean_var,
                format!(
                    "intra-class variance {clean_var:.4} → {adv_var:.4}, nearer-to-corrupted \
                     fraction {:.3} (reported, no threshold) ({provenance})",
                    shift.claim_fraction
                ),
            );
        } else {
            // The dispersion increase is a statement about converged models
            // on the real data; pipeline smoke-run numbers are shown for
            // visibility only.
            tally.skip(
                6,
                "latent dispersion shift",
                format!(
                    "needs real CIFAR-10 under data/ and SAE_ACCEPTANCE_FULL=1; synthetic \
                     short-run intra-class variance {clean_var:.4} → {adv_var:.4}, \
                     nearer-to-corrupted fraction {:.3}",
                    shift.claim_fraction
                ),
            );
        }
    }

    // ---- 7: t-SNE correctness ----------------------------------------------
    {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let points: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let aff = affinities(&points, 7.0).unwrap();
        let perp_err = aff
            .perplexities
            .iter()
            .map(|p| (p.log2() - 7.0f64.log2()).abs())
            .fold(0.0, f64::max);

        // KL gradient against central differences.
        let small: Vec<Vec<f64>> = points[..8].to_vec();
        let p = affinities(&small, 3.0).unwrap().p;
        let mut y: Vec<[f64; 2]> = (0..8)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let (_, grad) = kl_and_gradient(&p, &y);
        let h = 1e-6;
        let mut grad_err = 0.0f64;
        for i in 0..y.len() {
            for d in 0..2 {
                let orig = y[i][d];
                y[i][d] = orig + h;
                let up = kl_and_gradient(&p, &y).0;
                y[i][d] = orig - h;
                let down = kl_and_gradient(&p, &y).0;
                y[i][d] = orig;
                let numeric = (up - down) / (2.0 * h);
                let denom = grad[i][d].abs().max(numeric.abs()).max(1e-3);
                grad_err = grad_err.max((grad[i][d] - numeric).abs() / denom);
            }
        }

        let result = run_tsne(
            &points,
            &TsneConfig {
                perplexity: 5.0,
                seed: 11,
                ..TsneConfig::default()
            },
        )
        .unwrap();
        let kl_first = *result.kl_trace.first().unwrap();
        let kl_last = *result.kl_trace.last().unwrap();

        // Two 196-dimensional Gaussian blobs separate cleanly.
        let blob: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                (0..196)
                    .map(|d| {
                        let center = if i < 30 || d >= 10 { 0.0 } else { 2.0 };
                        center + rng.gen_range(-0.25..0.25)
                    })
                    .collect()
            })
            .collect();
        let blob_labels: Vec<usize> = (0..60).map(|i| usize::from(i >= 30)).collect();
        let emb = run_tsne(
            &blob,
            &TsneConfig {
                perplexity: 10.0,
                seed: 5,
                ..TsneConfig::default()
            },
        )
        .unwrap();
        let blob_sil = embedded_silhouette(&emb, &blob_labels);

        tally.check(
            7,
            "t-SNE correctness",
            perp_err < 1e-3 && grad_err < 1e-6 && kl_last < kl_first && blob_sil > 0.5,
            format!(
                "perplexity |log2 err| {perp_err:.2e}, KL grad rel err {grad_err:.2e}, \
                 KL {kl_first:.3} → {kl_last:.3}, blob silhouette {blob_sil:.3}"
            ),
        );
    }

    // ---- 8: metric oracles --------------------------------------------------
    {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (h, w) = (16, 16);
        let a: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|&v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
            .collect();

        let direct_mse =
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        let psnr_direct = 10.0 * (1.0 / direct_mse).log10();
        let psnr_err = (psnr(&a, &b, 1.0).unwrap() - psnr_direct).abs();

        let ssim_lib = ssim(&a, &b, h, w, 1).unwrap();
        let ssim_direct = ssim_oracle(&a, &b, h, w);
        let ssim_err = (ssim_lib - ssim_direct).abs();

        let self_one = ssim(&a, &a, h, w, 1).unwrap() == 1.0;
        let closed = (psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9
            && (psnr_from_mse(1e-4, 1.0) - 40.0).abs() < 1e-9;

        tally.check(
            8,
            "metric oracles",
            psnr_err < 1e-6 && ssim_err < 1e-6 && self_one && closed,
            format!(
                "PSNR oracle diff {psnr_err:.2e}, SSIM oracle diff {ssim_err:.2e}, \
                 SSIM(a,a)={}, MSE 0.01 → 20 dB exact",
                if self_one { "1.0" } else { "≠1.0" }
            ),
        );
    }

    // ---- 9: determinism of every command ------------------------------------
    {
        let dir = tempfile::tempdir().unwrap();
        let (ti, tl) = write_idx_pair(dir.path(), "train", 48, 12, 1);
        let (ei, el) = write_idx_pair(dir.path(), "test", 32, 12, 2);
        let data_args: Vec<String> = vec![
            "--set".into(),
            "dataset=mnist".into(),
            "--set".into(),
            format!("train_images={}", ti.display()),
            "--set".into(),
            format!("train_labels={}", tl.display()),
            "--set".into(),
            format!("test_images={}", ei.display()),
            "--set".into(),
            format!("test_labels={}", el.display()),
        ];
        let data: Vec<&str> = data_args.iter().map(String::as_str).collect();
        let path_of = |name: &str| dir.path().join(name).display().to_string();

        for tag in ["1", "2"] {
            let out = path_of(&format!("v{tag}"));
            let mut args = vec![
                "train",
                "--variant",
                "vanilla",
                "-o",
                out.as_str(),
                "--seed",
                "7",
                "--iterations",
                "30",
                "--set",
                "batch_size=8",
            ];
            args.extend_from_slice(&data);
            run_cli(&args);
        }
        let shared = path_of("v1/checkpoint.sae");
        for tag in ["1", "2"] {
            let out = path_of(&format!("s{tag}"));
            let mut args = vec![
                "train",
                "--variant",
                "semantic-shuffled",
                "--shared-checkpoint",
                shared.as_str(),
                "-o",
                out.as_str(),
                "--seed",
                "7",
                "--iterations",
                "30",
                "--set",
                "batch_size=8",
            ];
            args.extend_from_slice(&data);
            run_cli(&args);
        }
        let vanilla_ckpt = path_of("v1/checkpoint.sae");
        let shuffled_ckpt = path_of("s1/checkpoint.sae");
        for tag in ["1", "2"] {
            let out = path_of(&format!("r{tag}"));
            let mut args = vec![
                "reconstruct",
                "--checkpoint",
                vanilla_ckpt.as_str(),
                "-o",
                out.as_str(),
                "-n",
                "8",
            ];
            args.extend_from_slice(&data);
            run_cli(&args);
        }
        for tag in ["1", "2"] {
            let out = path_of(&format!("e{tag}"));
            let mut args = vec![
                "embed",
                "--checkpoint",
                vanilla_ckpt.as_str(),
                "-o",
                out.as_str(),
                "-n",
                "24",
                "--perplexity",
                "4",
                "--seed",
                "7",
            ];
            args.extend_from_slice(&data);
            run_cli(&args);
        }
        for tag in ["1", "2"] {
            let out = path_of(&format!("a{tag}"));
            let mut args = vec![
                "attack",
                "--vanilla",
                vanilla_ckpt.as_str(),
                "--shuffled",
                shuffled_ckpt.as_str(),
                "-o",
                out.as_str(),
                "-n",
                "24",
                "--perplexity",
                "4",
                "--seed",
                "7",
            ];
            args.extend_from_slice(&data);
            run_cli(&args);
        }
        // The report header names its directory, so rerun determinism is
        // checked by writing the same directory's report twice.
        let a1 = path_of("a1");
        let report_path = dir.path().join("a1/report.txt");
        run_cli(&["report", "--dir", a1.as_str()]);
        let report_first = std::fs::read(&report_path).unwrap();
        run_cli(&["report", "--dir", a1.as_str()]);
        let report_second = std::fs::read(&report_path).unwrap();

        let pairs = [
            ("v1/checkpoint.sae", "v2/checkpoint.sae"),
            ("v1/trace.csv", "v2/trace.csv"),
            ("s1/checkpoint.sae", "s2/checkpoint.sae"),
            ("s1/trace.csv", "s2/trace.csv"),
            ("r1/quality.csv", "r2/quality.csv"),
            ("r1/grid.pgm", "r2/grid.pgm"),
            ("e1/latents.csv", "e2/latents.csv"),
            ("e1/embedding.csv", "e2/embedding.csv"),
            ("a1/quality.csv", "a2/quality.csv"),
            ("a1/latent_shift.csv", "a2/latent_shift.csv"),
            ("a1/tsne_clean.csv", "a2/tsne_clean.csv"),
            ("a1/tsne_adversarial.csv", "a2/tsne_adversarial.csv"),
            ("a1/attack_grid.pgm", "a2/attack_grid.pgm"),
        ];
        let mut diffs = Vec::new();
        for &(left, right) in &pairs {
            assert_identical(
                &dir.path().join(left),
                &dir.path().join(right),
                left,
                &mut diffs,
            );
        }
        if report_first.is_empty() || report_first != report_second {
            diffs.push("a1/report.txt rerun".to_string());
        }
        tally.check(
            9,
            "determinism",
            diffs.is_empty(),
            if diffs.is_empty() {
                format!(
                    "{} artifacts byte-identical across reruns of train, reconstruct, embed, \
                     attack, report",
                    pairs.len() + 1
                )
            } else {
                format!("artifacts differ between identical reruns: {diffs:?}")
            },
        );
    }

    // ---- 10: adversarial-difference algebra ----------------------------------
    {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let shape = [4usize, 6, 6, 1];
        let count: usize = shape.iter().product();
        let mut rand_img = |lo: f32, hi: f32| -> Tensor<f32> {
            let data: Vec<f32> = (0..count).map(|_| rng.gen_range(lo..hi)).collect();
            Tensor::from_vec(data, &shape).unwrap()
        };
        let i = rand_img(0.0, 1.0);
        let iv = rand_img(0.01, 0.99);
        let is_ = rand_img(0.01, 0.99);

        let batch = make_adversarial(&i, &iv, &is_, false).unwrap();
        let mut stored_bad = 0usize;
        let mut closure_bad = 0usize;
        {
            let (id, ivd, isd) = (i.data(), iv.data(), is_.data());
            let (ad, pd) = (batch.adversarial.data(), batch.perturbation.data());
            for k in 0..count {
                let want = f64::from(isd[k]) - f64::from(ivd[k]);
                stored_bad += usize::from(pd[k].to_bits() != want.to_bits());
                closure_bad += usize::from((ad[k] - f64::from(id[k])).to_bits() != want.to_bits());
            }
        }

        let same = make_adversarial(&i, &iv, &iv.clone(), false).unwrap();
        let cancel_bad = same
            .adversarial
            .data()
            .iter()
            .zip(i.data().iter())
            .filter(|(a, b)| a.to_bits() != f64::from(**b).to_bits())
            .count();
        let narrow_bad = same
            .adversarial
            .narrow()
            .data()
            .iter()
            .zip(i.data().iter())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();

        tally.check(
            10,
            "adversarial-difference algebra",
            stored_bad == 0 && closure_bad == 0 && cancel_bad == 0 && narrow_bad == 0,
            format!(
                "over {count} pixels, clamping off: perturbation == I_s − I_v \
                 ({stored_bad} mismatched), I_a − I recovers it bit-for-bit \
                 ({closure_bad} mismatched), I_s = I_v reproduces I \
                 ({cancel_bad} wide, {narrow_bad} narrowed)"
            ),
        );
    }

    // ---- summary -------------------------------------------------------------
    println!("\n==== acceptance summary ====");
    for outcome in &tally.0 {
        println!("{}", outcome.line);
    }
    let failures: Vec<&str> = tally
        .0
        .iter()
        .filter(|o| o.failed)
        .map(|o| o.line.as_str())
        .collect();
    assert!(
        failures.is_empty(),
        "acceptance criteria failed:\n{}",
        failures.join("\n")
    );
}
