//! Binary checkpoint: magic, version, JSON header, little-endian tensor data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lora::LoraSpec;
use super::params::ParamKind;
use super::tensor::Scalar;
use super::transformer::ModelConfig;
use super::Model;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DSUMCKPT";
const VERSION: u32 = 1;

/// Free-form training facts stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub vocab: Option<String>,
    pub task: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    dtype: String,
    offset: usize,
    nbytes: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lora: Option<LoraSpec>,
    meta: CheckpointMeta,
    data_fnv64: u64,
    tensors: Vec<TensorEntry>,
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut data = Vec::with_capacity(model.store.total_count() * S::BYTES);
    let mut tensors = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        let offset = data.len();
        for &v in &p.data {
            v.write_le(&mut data);
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            kind: p.kind,
            dtype: S::DTYPE.to_string(),
            offset,
            nbytes: data.len() - offset,
            trainable: p.trainable,
        });
    }
    let header = serde_json::to_vec(&Header {
        config: model.cfg.clone(),
        lora: model.lora.clone(),
        meta: meta.clone(),
        data_fnv64: fnv64(&data),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_values<S: Scalar>(bytes: &[u8], dtype: &str) -> Result<Vec<S>> {
    match dtype {
        "f32" => Ok(bytes.chunks_exact(4).map(|c| S::c(f64::from(f32::read_le(c)))).collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(|c| S::c(f64::read_le(c))).collect()),
        other => Err(corrupt(format!("unsupported dtype {other}"))),
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Model<S>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let data = &body[hlen..];
    if fnv64(data) != header.data_fnv64 {
        return Err(corrupt("tensor data checksum mismatch"));
    }

    let mut model = Model::<S>::new(header.config).map_err(|e| corrupt(e.to_string()))?;
    if let Some(spec) = &header.lora {
        model.attach_lora(spec).map_err(|e| corrupt(e.to_string()))?;
    }
    if header.tensors.len() != model.store.len() {
        return Err(corrupt(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for t in &header.tensors {
        let id = model
            .store
            .find(&t.name)
            .ok_or_else(|| corrupt(format!("unexpected tensor {}", t.name)))?;
        let end = t.offset.checked_add(t.nbytes).filter(|&e| e <= data.len());
        let end = end.ok_or_else(|| corrupt(format!("tensor {} out of bounds", t.name)))?;
        let values = read_values::<S>(&data[t.offset..end], &t.dtype)?;
        let p = model.store.param(id);
        if p.shape != t.shape || values.len() != p.data.len() {
            return Err(corrupt(format!("shape mismatch for {}", t.name)));
        }
        model.store.get_mut(id).copy_from_slice(&values);
        model.store.iter_mut().nth(id.0).expect("valid id").trainable = t.trainable;
    }
    Ok((model, header.meta))
}
