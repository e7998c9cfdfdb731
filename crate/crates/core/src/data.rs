//! Dataset loading and batching.
//!
//! Reads the MNIST IDX format (plain or gzip) and CIFAR-10 binary batches
//! from local files, normalizes pixels to [0,1] by dividing by 255, and
//! provides class filtering, per-channel splitting, and seeded batch
//! iteration. Nothing here touches the network.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found} (expected {expected})")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: file truncated (expected {expected} bytes of {what}, found {found})")]
    Truncated {
        path: String,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    BadRecordLength {
        path: String,
        len: usize,
        record: usize,
    },
    #[error("{path}: label byte {label} exceeds class count {classes}")]
    BadLabel {
        path: String,
        label: u8,
        classes: usize,
    },
    #[error("class filter is empty")]
    EmptyFilter,
    #[error("class filter names class {class} but dataset has {classes} classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("cannot merge: {0}")]
    MergeMismatch(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labeled images, NHWC with pixels in [0,1].
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
    source: String,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be NHWC, got shape {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::Invalid(format!(
                "label {l} out of range for {} classes",
                class_names.len()
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DataError::Invalid("pixel outside [0,1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn image_len(&self) -> usize {
        self.height() * self.width() * self.channels()
    }

    /// Pixels of image `i` as a fresh vector.
    pub fn image_vec(&self, i: usize) -> Vec<f32> {
        let len = self.image_len();
        self.images.data()[i * len..(i + 1) * len].to_vec()
    }

    /// New dataset containing `indices` in order (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let len = self.image_len();
        let data = self.images.data();
        let mut images = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(&data[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        drop(data);
        Dataset {
            images: Tensor::from_vec(
                images,
                &[indices.len(), self.height(), self.width(), self.channels()],
            )
            .expect("length matches shape"),
            labels,
            class_names: self.class_names.clone(),
            source: self.source.clone(),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&indices)
    }

    /// Batch tensor + labels for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.subset(indices);
        (s.images, s.labels)
    }
}

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// Read a whole file, transparently gunzipping if it starts with the gzip
/// magic bytes.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let wrap = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut raw = Vec::new();
    File::open(path).map_err(wrap)?.read_to_end(&mut raw).map_err(wrap)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(wrap)?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &'static str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            what,
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load an MNIST-style image/label file pair (IDX format, big-endian
/// headers, magic 2051/2049). Pixels become byte/255.
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let ipath = images_path.as_ref();
    let lpath = labels_path.as_ref();
    let ibytes = read_maybe_gz(ipath)?;
    let lbytes = read_maybe_gz(lpath)?;

    let magic = be_u32(&ibytes, 0, ipath, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: ipath.display().to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = be_u32(&ibytes, 4, ipath, "image count")? as usize;
    let rows = be_u32(&ibytes, 8, ipath, "row count")? as usize;
    let cols = be_u32(&ibytes, 12, ipath, "column count")? as usize;
    let expected = 16 + count * rows * cols;
    if ibytes.len() < expected {
        return Err(DataError::Truncated {
            path: ipath.display().to_string(),
            what: "image pixels",
            expected,
            found: ibytes.len(),
        });
    }

    let magic = be_u32(&lbytes, 0, lpath, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: lpath.display().to_string(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let label_count = be_u32(&lbytes, 4, lpath, "label count")? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let expected = 8 + count;
    if lbytes.len() < expected {
        return Err(DataError::Truncated {
            path: lpath.display().to_string(),
            what: "labels",
            expected,
            found: lbytes.len(),
        });
    }

    let pixels: Vec<f32> = ibytes[16..16 + count * rows * cols]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let mut labels = Vec::with_capacity(count);
    for &b in &lbytes[8..8 + count] {
        if b > 9 {
            return Err(DataError::BadLabel {
                path: lpath.display().to_string(),
                label: b,
                classes: 10,
            });
        }
        labels.push(b as usize);
    }

    Ok(Dataset {
        images: Tensor::from_vec(pixels, &[count, rows, cols, 1]).expect("length matches header"),
        labels,
        class_names: (0..10).map(|d| d.to_string()).collect(),
        source: format!("mnist:{}", ipath.display()),
    })
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 × 1024 channel planes
const CIFAR_CLASS_NAMES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Load one or more CIFAR-10 binary batch files (3073-byte records, channel
/// planes R then G then B), interleaving planes to HWC.
pub fn load_cifar10(batch_paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::BadRecordLength {
                path: path.display().to_string(),
                len: bytes.len(),
                record: CIFAR_RECORD,
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0];
            if label > 9 {
                return Err(DataError::BadLabel {
                    path: path.display().to_string(),
                    label,
                    classes: 10,
                });
            }
            labels.push(label as usize);
            let planes = &record[1..];
            for pixel in 0..1024 {
                for channel in 0..3 {
                    pixels.push(planes[channel * 1024 + pixel] as f32 / 255.0);
                }
            }
        }
        sources.push(path.display().to_string());
    }
    let count = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(pixels, &[count, 32, 32, 3]).expect("length matches records"),
        labels,
        class_names: CIFAR_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        source: format!("cifar10:{}", sources.join(",")),
    })
}

// ---------------------------------------------------------------------------
// Transformations
// ---------------------------------------------------------------------------

/// Keep only samples whose label is in `keep`; labels are re-indexed to
/// 0..keep.len() in `keep` order, and class names follow.
pub fn filter_classes(ds: &Dataset, keep: &[usize]) -> Result<Dataset> {
    if keep.is_empty() {
        return Err(DataError::EmptyFilter);
    }
    for &class in keep {
        if class >= ds.num_classes() {
            return Err(DataError::UnknownClass {
                class,
                classes: ds.num_classes(),
            });
        }
    }
    let reindex: std::collections::HashMap<usize, usize> =
        keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let indices: Vec<usize> = (0..ds.len())
        .filter(|&i| reindex.contains_key(&ds.labels[i]))
        .collect();
    let mut out = ds.subset(&indices);
    for label in &mut out.labels {
        *label = reindex[label];
    }
    out.class_names = keep.iter().map(|&c| ds.class_names[c].clone()).collect();
    Ok(out)
}

/// One single-channel dataset per channel, in channel order. Labels and
/// class names are shared; sources get a `#ch<i>` suffix.
pub fn split_channels(ds: &Dataset) -> Vec<Dataset> {
    let (n, h, w, c) = (ds.len(), ds.height(), ds.width(), ds.channels());
    let data = ds.images.data();
    (0..c)
        .map(|ch| {
            let plane: Vec<f32> = (0..n * h * w).map(|i| data[i * c + ch]).collect();
            Dataset {
                images: Tensor::from_vec(plane, &[n, h, w, 1]).expect("length matches shape"),
                labels: ds.labels.clone(),
                class_names: ds.class_names.clone(),
                source: format!("{}#ch{ch}", ds.source),
            }
        })
        .collect()
}

/// Exact inverse of [`split_channels`]: interleave single-channel datasets
/// back into one multi-channel dataset.
pub fn merge_channels(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or(DataError::MergeMismatch(
        "no channel datasets supplied".into(),
    ))?;
    for (i, p) in parts.iter().enumerate() {
        if p.channels() != 1 {
            return Err(DataError::MergeMismatch(format!(
                "part {i} has {} channels, expected 1",
                p.channels()
            )));
        }
        if (p.len(), p.height(), p.width()) != (first.len(), first.height(), first.width()) {
            return Err(DataError::MergeMismatch(format!(
                "part {i} geometry {}×{}×{} differs from part 0",
                p.len(),
                p.height(),
                p.width()
            )));
        }
        if p.labels != first.labels {
            return Err(DataError::MergeMismatch(format!(
                "part {i} labels differ from part 0"
            )));
        }
    }
    let (n, h, w, c) = (first.len(), first.height(), first.width(), parts.len());
    let planes: Vec<_> = parts.iter().map(|p| p.images.data()).collect();
    let mut pixels = Vec::with_capacity(n * h * w * c);
    for i in 0..n * h * w {
        for plane in &planes {
            pixels.push(plane[i]);
        }
    }
    drop(planes);
    let source = first
        .source
        .strip_suffix("#ch0")
        .unwrap_or(&first.source)
        .to_string();
    Ok(Dataset {
        images: Tensor::from_vec(pixels, &[n, h, w, c]).expect("length matches shape"),
        labels: first.labels.clone(),
        class_names: first.class_names.clone(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// Stream 4 of the run seed; streams 1–3 are the sub-net initializers and
// stream 5 is label shuffling, so none of them overlap.
const STREAM_BATCHES: u64 = 4;

/// Endless batch stream: each epoch is a fresh seeded shuffle of the sample
/// indices cut into `batch_size` chunks, remainder dropped.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    batch_size: usize,
    rng: ChaCha20Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    pub fn per_epoch(&self) -> usize {
        self.ds.len() / self.batch_size
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.per_epoch() == 0 {
            return None;
        }
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let slice = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        Some(self.ds.gather(slice))
    }
}

/// Seeded batch iteration over `ds`; identical seeds give identical batch
/// sequences.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64) -> BatchIter<'_> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_BATCHES);
    let order: Vec<usize> = (0..ds.len()).collect();
    let cursor = order.len(); // force a shuffle before the first batch
    BatchIter {
        ds,
        batch_size,
        rng,
        order,
        cursor,
    }
}
