//! Fixture writers shared by the CLI integration tests: tiny datasets in
//! the real on-disk formats (IDX image/label pairs, CIFAR-10 binary
//! batches) with two visually distinct classes so short training runs
//! still learn something.

// Each integration test target compiles its own copy; not all of them use
// every fixture.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn sae() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sae"))
}

pub fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output {
        status,
        stdout,
        stderr,
    } = cmd.output().expect("spawn sae binary");
    (
        status.code().unwrap_or(-1),
        String::from_utf8_lossy(&stdout).into_owned(),
        String::from_utf8_lossy(&stderr).into_owned(),
    )
}

fn noisy(base: f64, rng: &mut ChaCha20Rng) -> u8 {
    let v = (base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
    (v * 255.0).round() as u8
}

/// IDX image/label pair: class 0 bright in the top half, class 1 bright in
/// the bottom half, labels alternating. `side` must be ≥ 12 so the SSIM
/// window fits and divisible by 4 for the two pooling stages.
pub fn write_idx_pair(dir: &Path, name: &str, n: usize, side: usize, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(16 + n * side * side);
    images.extend_from_slice(&2051u32.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&(side as u32).to_be_bytes());
    images.extend_from_slice(&(side as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&2049u32.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let label = i % 2;
        labels.push(label as u8);
        for y in 0..side {
            for _ in 0..side {
                let bright = (label == 0) == (y < side / 2);
                images.push(noisy(if bright { 0.8 } else { 0.2 }, &mut rng));
            }
        }
    }
    let ipath = dir.join(format!("{name}-images.idx"));
    let lpath = dir.join(format!("{name}-labels.idx"));
    fs::write(&ipath, images).unwrap();
    fs::write(&lpath, labels).unwrap();
    (ipath, lpath)
}

/// CIFAR-10 binary batch (3073-byte records, planes R/G/B): class 0 has a
/// bright red top half, class 1 a bright red bottom half; green and blue
/// stay mid-gray. Labels alternate 0/1.
pub fn write_cifar_batch(path: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(n * 3073);
    for i in 0..n {
        let label = i % 2;
        bytes.push(label as u8);
        for channel in 0..3 {
            for y in 0..32 {
                for _ in 0..32 {
                    let base = if channel == 0 {
                        let bright = (label == 0) == (y < 16);
                        if bright {
                            0.8
                        } else {
                            0.2
                        }
                    } else {
                        0.5
                    };
                    bytes.push(noisy(base, &mut rng));
                }
            }
        }
    }
    fs::write(path, bytes).unwrap();
}
