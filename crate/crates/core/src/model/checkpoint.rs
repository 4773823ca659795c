//! Binary checkpoint: magic, format version, JSON header, then little-endian
//! `f64` data for every tensor in declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"C3POCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    has_adapters: bool,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(params: &ModelParams, vocab_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let named = params.named_tensors();
    let header = Header {
        config: params.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        has_adapters: params.adapters.is_some(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
    let numel: usize = named.iter().map(|(_, t)| t.numel()).sum();
    let mut buf = Vec::with_capacity(MAGIC.len() + 12 + header.len() + 8 * numel);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &named {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, rejecting it unless its vocabulary digest equals `vocab_hash`.
pub fn load_checkpoint(path: impl AsRef<Path>, vocab_hash: &str) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let mut at = MAGIC.len();
    let version = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    at += 4;
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
    at += 8;
    let header_bytes = bytes
        .get(at..at.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("corrupt header: {e}")))?;
    at += hlen;
    if header.vocab_hash != vocab_hash {
        return Err(bad(format!(
            "vocabulary hash {} does not match expected {vocab_hash}",
            header.vocab_hash
        )));
    }
    header.config.validate()?;
    let mut expected = header.config.base_layout();
    if header.has_adapters {
        expected.extend(header.config.adapter_layout());
    }
    let declared: Vec<(String, Vec<usize>)> = header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
    if declared != expected {
        return Err(bad("tensor list does not match the configuration".into()));
    }
    let numel: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() - at != 8 * numel {
        return Err(bad(format!(
            "expected {} data bytes, found {}",
            8 * numel,
            bytes.len() - at
        )));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (_, shape) in expected {
        let n: usize = shape.iter().product();
        let data = bytes[at..at + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += 8 * n;
        tensors.push(Tensor::new(shape, data)?);
    }
    let n_base = header.config.base_layout().len();
    let adapters = header.has_adapters.then(|| tensors.split_off(n_base));
    let params = ModelParams {
        config: header.config,
        base: tensors,
        adapters,
    };
    if !params.all_finite() {
        return Err(bad("non-finite weights".into()));
    }
    Ok(params)
}
