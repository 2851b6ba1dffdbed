//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"LAE1" | version: u32 | header_len: u64 | header: JSON (header_len bytes) | payload
//! ```
//!
//! The JSON header holds the model config, a tensor manifest
//! (`name`, `shape`, byte `offset` into the payload, element count `len`)
//! and training metadata. The payload is every tensor as raw `f32` values
//! in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Autoencoder, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LAE1";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;
const MAX_HEADER: u64 = 16 << 20;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: TrainingMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Autoencoder<f32>,
    pub meta: TrainingMeta,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(model: &Autoencoder<f32>, meta: &TrainingMeta) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = model
        .params()
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel() as u64,
            };
            offset += 4 * e.len;
            e
        })
        .collect();
    let header = Header {
        config: model.config().clone(),
        tensors,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("bad checkpoint header"));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(bad("truncated checkpoint prefix"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER || header_len > (bytes.len() - PREFIX_LEN) as u64 {
        return Err(bad(format!(
            "truncated checkpoint: header of {header_len} bytes"
        )));
    }
    let payload_start = PREFIX_LEN + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start])
        .map_err(|e| bad(format!("malformed checkpoint header: {e}")))?;
    header.config.validate()?;

    // check the whole shape table against the file size before allocating
    let payload = &bytes[payload_start..];
    let mut expected = 0u64;
    for e in &header.tensors {
        let count = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| bad(format!("tensor {} shape overflows", e.name)))?;
        if e.shape.contains(&0) || count != e.len {
            return Err(bad(format!(
                "tensor {}: shape {:?} does not match length {}",
                e.name, e.shape, e.len
            )));
        }
        if e.offset != expected {
            return Err(bad(format!(
                "tensor {}: offset {} but expected {expected}",
                e.name, e.offset
            )));
        }
        expected = expected
            .checked_add(4 * e.len)
            .ok_or_else(|| bad("payload size overflows"))?;
    }
    if (payload.len() as u64) < expected {
        return Err(bad(format!(
            "truncated checkpoint: payload has {} bytes, manifest needs {expected}",
            payload.len()
        )));
    }
    if payload.len() as u64 > expected {
        return Err(bad(format!(
            "checkpoint size mismatch: {} trailing bytes",
            payload.len() as u64 - expected
        )));
    }

    let mut named = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let start = e.offset as usize;
        let raw = &payload[start..start + 4 * e.len as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let model = Autoencoder::from_params(header.config, named)?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

pub fn save(path: &Path, model: &Autoencoder<f32>, meta: &TrainingMeta) -> Result<()> {
    fs::write(path, to_bytes(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
