//! Versioned binary checkpoint.
//!
//! Layout: 8-byte magic `WINTRCKP`, `u32` format version, `u64` header
//! length, a JSON header (model config plus the ordered list of named
//! tensor shapes), then every tensor's values as little-endian `f64`.
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::WinTrModel;
use super::params::Params;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WINTRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(model: &WinTrModel) -> Result<Vec<u8>> {
    let names = model.params.names();
    let tensors = model.params.flat();
    let header = Header {
        config: model.config.clone(),
        tensors: names
            .into_iter()
            .zip(&tensors)
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|t| t.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + header.len() + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<WinTrModel> {
    let magic = take(&mut bytes, 8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().unwrap());
    let header: Header = serde_json::from_slice(take(&mut bytes, header_len as usize, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;

    // Shapes and names must agree with the architecture the config implies.
    let template = Params::zeros(&header.config);
    let names = template.names();
    if names.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, header lists {}",
            names.len(),
            header.tensors.len()
        )));
    }
    let mut params = template;
    for ((slot, name), entry) in params.flat_mut().into_iter().zip(&names).zip(&header.tensors) {
        if &entry.name != name || entry.shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{}` {:?}",
                entry.name,
                entry.shape,
                name,
                slot.shape()
            )));
        }
        let raw = take(&mut bytes, slot.len() * 8, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *slot = Tensor::new(entry.shape.clone(), data)?;
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len()
        )));
    }
    Ok(WinTrModel {
        config: header.config,
        params,
    })
}

pub fn save(model: &WinTrModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<WinTrModel> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint and checks it was built for `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<WinTrModel> {
    let model = load(path)?;
    if &model.config != expected {
        return Err(Error::Checkpoint(format!(
            "{}: model config {:?} does not match expected {:?}",
            path.display(),
            model.config,
            expected
        )));
    }
    Ok(model)
}
