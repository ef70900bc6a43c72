//! Checkpoint file: 8-byte magic, `u64` LE header length, JSON header,
//! then one blob of little-endian `f32` values (parameters first, then
//! optimizer moments). The header carries the offsets of every tensor.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Optimizer, OptimizerConfig};
use crate::autodiff::{Float, ParamKind};
use crate::error::{io, json, Error, Result};
use crate::models::{Model, ModelSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SLSTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A run of `len` values starting at `offset` (both counted in `f32`s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub param: String,
    pub which: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub step: u64,
    pub slots: Vec<SlotEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub topology_digest: String,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerHeader>,
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub blob_len: usize,
    pub blob_sha256: String,
}

pub struct LoadedCheckpoint<T: Float> {
    pub model: Model<T>,
    pub optimizer: Option<Optimizer<T>>,
    pub epoch: usize,
    pub best_metric: Option<f64>,
}

fn push_values<T: Float>(blob: &mut Vec<f32>, values: &[T]) -> (usize, usize) {
    let offset = blob.len();
    blob.extend(values.iter().map(|v| v.f64() as f32));
    (offset, values.len())
}

pub fn save_checkpoint<T: Float>(
    path: &Path,
    model: &Model<T>,
    optimizer: Option<&Optimizer<T>>,
    epoch: usize,
    best_metric: Option<f64>,
) -> Result<()> {
    let mut blob: Vec<f32> = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.store.iter() {
        let (offset, len) = push_values(&mut blob, p.value.data());
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            kind: p.kind,
            offset,
            len,
        });
    }
    let optimizer = optimizer.map(|opt| {
        let mut slots = Vec::new();
        for (which, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for (i, values) in moments.iter().enumerate() {
                if let Some(values) = values {
                    let (offset, len) = push_values(&mut blob, values);
                    slots.push(SlotEntry {
                        param: tensors[i].name.clone(),
                        which: which.to_string(),
                        offset,
                        len,
                    });
                }
            }
        }
        OptimizerHeader {
            config: opt.cfg.clone(),
            lr: opt.lr,
            step: opt.step,
            slots,
        }
    });
    let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        topology_digest: model.store.topology_digest(),
        tensors,
        optimizer,
        epoch,
        best_metric,
        blob_len: blob.len(),
        blob_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let text = serde_json::to_vec(&header).map_err(json(path))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(CHECKPOINT_MAGIC)
        .and_then(|_| f.write_all(&(text.len() as u64).to_le_bytes()))
        .and_then(|_| f.write_all(&text))
        .and_then(|_| f.write_all(&bytes))
        .map_err(io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io(path))
}

fn split_file<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointHeader, &'a [u8])> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end]).map_err(json(path))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported checkpoint version {}", header.format_version)));
    }
    let blob = &bytes[end..];
    if blob.len() != 4 * header.blob_len {
        return Err(corrupt(&format!("expected {} blob bytes, found {}", 4 * header.blob_len, blob.len())));
    }
    let found = hex::encode(Sha256::digest(blob));
    if found != header.blob_sha256 {
        return Err(Error::DigestMismatch {
            path: path.to_path_buf(),
            expected: header.blob_sha256,
            found,
        });
    }
    Ok((header, blob))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(io(path))?;
    Ok(split_file(path, &bytes)?.0)
}

fn values<T: Float>(blob: &[u8], offset: usize, len: usize) -> Result<Vec<T>> {
    let bytes = blob
        .get(4 * offset..4 * (offset + len))
        .ok_or_else(|| Error::Checkpoint(format!("tensor at {offset}+{len} runs past the blob")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

/// Rebuilds the model described by the header and fills in every tensor.
pub fn load_checkpoint<T: Float>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let bytes = fs::read(path).map_err(io(path))?;
    let (header, blob) = split_file(path, &bytes)?;
    let mut model = Model::<T>::build(header.spec.clone(), 0)?;
    if model.store.topology_digest() != header.topology_digest || model.store.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} topology does not match the stored parameters",
            header.spec.name()
        )));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let v = model.store.value_mut(id);
        if v.shape() != entry.shape.as_slice() || entry.len != v.numel() {
            return Err(Error::Checkpoint(format!("tensor `{}` has the wrong size", entry.name)));
        }
        v.data_mut().copy_from_slice(&values::<T>(blob, entry.offset, entry.len)?);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(h) => {
            let mut opt = Optimizer::new(h.config.clone())?;
            opt.lr = h.lr;
            opt.step = h.step;
            opt.m = vec![None; model.store.len()];
            opt.v = vec![None; model.store.len()];
            for slot in &h.slots {
                let id = model
                    .store
                    .id(&slot.param)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer slot for unknown `{}`", slot.param)))?;
                let target = match slot.which.as_str() {
                    "m" => &mut opt.m,
                    "v" => &mut opt.v,
                    other => return Err(Error::Checkpoint(format!("unknown optimizer slot `{other}`"))),
                };
                target[id.index()] = Some(values(blob, slot.offset, slot.len)?);
            }
            Some(opt)
        }
    };
    Ok(LoadedCheckpoint {
        model,
        optimizer,
        epoch: header.epoch,
        best_metric: header.best_metric,
    })
}
