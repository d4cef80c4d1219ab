//! Versioned binary container for parameter sets.
//!
//! Layout: the magic `SCDECKPT`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header (kind, free-form metadata, tensor names and
//! shapes), then every tensor as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CdeAutoencoder, LossBreakdown, ModelConfig, ModelError, ParamSet};
use crate::diffcore::Array;

const MAGIC: &[u8; 8] = b"SCDECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn write_container(path: &Path, kind: &str, meta: serde_json::Value, params: &ParamSet) -> Result<(), ModelError> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: params
            .names()
            .iter()
            .zip(params.values())
            .map(|(n, v)| TensorEntry {
                name: n.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * params.n_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in params.values() {
        for x in v.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Returns `(kind, meta, params)`.
pub fn read_container(path: &Path) -> Result<(String, serde_json::Value, ParamSet), ModelError> {
    let buf = fs::read(path)?;
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let body = buf.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut at = 20 + hlen;
    let mut params = ParamSet::new();
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let bytes = buf.get(at..at + 8 * n).ok_or_else(|| bad("truncated payload"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(t.name, Array::new(t.shape, data)?);
        at += 8 * n;
    }
    if at != buf.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((header.kind, header.meta, params))
}

pub const AUTOENCODER_KIND: &str = "cde_autoencoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Echo of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub run_config: serde_json::Value,
}

pub fn save_autoencoder(path: &Path, model: &CdeAutoencoder, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let json = serde_json::to_value(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    write_container(path, AUTOENCODER_KIND, json, model.params())
}

pub fn load_autoencoder(path: &Path) -> Result<(CdeAutoencoder, CheckpointMeta), ModelError> {
    let (kind, meta, params) = read_container(path)?;
    if kind != AUTOENCODER_KIND {
        return Err(ModelError::Checkpoint(format!(
            "{} holds a '{kind}', not an autoencoder",
            path.display()
        )));
    }
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let model = CdeAutoencoder::from_params(meta.model.clone(), params)?;
    Ok((model, meta))
}
