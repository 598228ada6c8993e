//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AvsrModel, ModelConfig};
use crate::params::ParamKind;
use crate::scalar::Scalar;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"PAVSRCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab: Vocab,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<F: Scalar>(path: &Path, model: &AvsrModel<F>, step: usize) -> Result<()> {
    let store = &model.store;
    let tensors = store
        .ids()
        .map(|id| TensorEntry {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
            buffer: store.kind(id) == ParamKind::Buffer,
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        vocab: model.vocab().clone(),
        step,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * store.num_weights());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for id in store.ids() {
        for x in store.get(id).data() {
            buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = bytes[16 + len..].to_vec();
    Ok((header, payload))
}

/// Rebuilds the model described by the header and fills in every tensor.
pub fn load<F: Scalar>(path: &Path) -> Result<(AvsrModel<F>, CheckpointHeader)> {
    let (header, payload) = read_header(path)?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut model = AvsrModel::<F>::new(header.model.clone())?;
    model.vocab().check_compatible(&header.vocab)?;
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != 4 * expected {
        return Err(bad(format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            4 * expected
        )));
    }
    if header.tensors.len() != model.store.len() {
        return Err(bad(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| F::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))));
    for entry in &header.tensors {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| bad(format!("unknown tensor `{}`", entry.name)))?;
        if model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                model.store.get(id).shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let data: Vec<F> = floats.by_ref().take(n).collect();
        model.store.set_data(id, &data)?;
    }
    Ok((model, header))
}
