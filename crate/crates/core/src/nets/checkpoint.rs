//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic `SAE1` · version u32 · entry count u32 ·
//!   entries: name length u32, UTF-8 name, rank u32, extents u32…, raw f32
//!   payload · metadata block (input geometry, class count, classifier and
//!   freeze flags, iterations, seed, λ, shuffle flag, dataset id).
//!
//! Round trips are bit-exact: payloads are the in-memory f32 values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ArchConfig, Model};
use crate::tensor::TensorError;

const MAGIC: &[u8; 4] = b"SAE1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("checkpoint contains unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ParameterShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] TensorError),
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub iterations: u64,
    pub seed: u64,
    pub dataset_id: String,
    pub lambda_cls: f32,
    pub shuffle_labels: bool,
}

pub fn save_checkpoint(
    model: &Model,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;

    let entries = model.named_params();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u32).to_le_bytes())?;
        }
        for &v in tensor.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }

    w.write_all(&(model.arch.height as u32).to_le_bytes())?;
    w.write_all(&(model.arch.width as u32).to_le_bytes())?;
    w.write_all(&(model.arch.channels as u32).to_le_bytes())?;
    w.write_all(&(model.arch.num_classes as u32).to_le_bytes())?;
    w.write_all(&[model.classifier.is_some() as u8])?;
    w.write_all(&[model.decoder_frozen as u8])?;
    w.write_all(&meta.iterations.to_le_bytes())?;
    w.write_all(&meta.seed.to_le_bytes())?;
    w.write_all(&meta.lambda_cls.to_le_bytes())?;
    w.write_all(&[meta.shuffle_labels as u8])?;
    w.write_all(&(meta.dataset_id.len() as u32).to_le_bytes())?;
    w.write_all(meta.dataset_id.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let mut r = Reader(BufReader::new(File::open(path)?));

    let magic = r.bytes::<4>("magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let count = r.u32("entry count")?;
    let mut table: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name =
            String::from_utf8(r.vec(name_len, "name")?).map_err(|_| CheckpointError::BadName)?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.vec(numel * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        table.insert(name, (shape, data));
    }

    let arch = ArchConfig {
        height: r.u32("height")? as usize,
        width: r.u32("width")? as usize,
        channels: r.u32("channels")? as usize,
        num_classes: r.u32("num_classes")? as usize,
    };
    let has_classifier = r.bytes::<1>("classifier flag")?[0] != 0;
    let decoder_frozen = r.bytes::<1>("freeze flag")?[0] != 0;
    let meta = CheckpointMeta {
        iterations: u64::from_le_bytes(r.bytes::<8>("iterations")?),
        seed: u64::from_le_bytes(r.bytes::<8>("seed")?),
        lambda_cls: f32::from_le_bytes(r.bytes::<4>("lambda")?),
        shuffle_labels: r.bytes::<1>("shuffle flag")?[0] != 0,
        dataset_id: {
            let len = r.u32("dataset id length")? as usize;
            String::from_utf8(r.vec(len, "dataset id")?).map_err(|_| CheckpointError::BadName)?
        },
    };

    let mut model = Model::init(arch, 0, has_classifier)?;
    model.decoder_frozen = decoder_frozen;
    for (name, tensor) in model.named_params() {
        let (shape, data) = table
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingParameter(name.to_string()))?;
        if shape != tensor.shape() {
            return Err(CheckpointError::ParameterShape {
                name: name.to_string(),
                found: shape,
                expected: tensor.shape().to_vec(),
            });
        }
        tensor.data_mut().copy_from_slice(&data);
    }
    if let Some(name) = table.into_keys().next() {
        return Err(CheckpointError::UnknownParameter(name));
    }
    Ok((model, meta))
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CheckpointError> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn vec(&mut self, len: usize, what: &'static str) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0u8; len];
        self.0.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
        Ok(buf)
    }
}

fn truncated(e: std::io::Error, what: &'static str) -> CheckpointError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CheckpointError::Truncated(what)
    } else {
        CheckpointError::Io(e)
    }
}
