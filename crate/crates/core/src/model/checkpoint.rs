//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "TISSCKPT"
//! version    u32       1
//! header_len u64       byte length of the JSON header
//! header     JSON      CheckpointHeader
//! blobs      f32[]     tensors back to back, in header order
//! ```
//!
//! Each header tensor entry carries its name, shape and offset (in floats)
//! into the blob section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::protocol::TaskSequence;
use crate::{Error, Real, Result};

const MAGIC: &[u8; 8] = b"TISSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step_index: usize,
    pub sequence: TaskSequence,
    pub n_classes: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model<f32>,
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, seq: &TaskSequence, step_index: usize) -> Result<()> {
    if model.n_classes() != seq.n_seen(step_index) {
        return Err(Error::Checkpoint(format!(
            "model has {} classes but step {step_index} sees {}",
            model.n_classes(),
            seq.n_seen(step_index)
        )));
    }
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in model.tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for &v in t.iter() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        model: model.config().clone(),
        step_index,
        sequence: seq.clone(),
        n_classes: model.n_classes(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected` set, a different model config is rejected.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if let Some(cfg) = expected {
        if cfg != &header.model {
            return Err(bad(&format!(
                "model config mismatch: checkpoint has {:?}, expected {cfg:?}",
                header.model
            )));
        }
    }
    let blob = &bytes[20 + header_len..];
    let mut model = Model::<f32>::zeros(header.model.clone(), header.n_classes)?;
    {
        let slots = model.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad("tensor count does not match the model config"));
        }
        for ((name, mut dst), entry) in slots.into_iter().zip(&header.tensors) {
            if name != entry.name || dst.shape() != entry.shape.as_slice() {
                return Err(bad(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            let start = entry.offset * 4;
            let raw = blob
                .get(start..start + dst.len() * 4)
                .ok_or_else(|| bad("truncated tensor data"))?;
            for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    Ok(Checkpoint { header, model })
}
