//! Binary parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header (format
//! version, resolved run config, tensor table with name/offset/shape), then
//! every tensor's values as little-endian 32-bit floats in table order.
//! Offsets count floats from the start of the payload. Load followed by save
//! reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

/// A loaded checkpoint: the config it was produced under plus the parameters.
#[derive(Debug)]
pub struct Checkpoint {
    pub format_version: String,
    pub config: serde_json::Value,
    pub params: ParamSet<f32>,
}

pub fn to_bytes(config: &serde_json::Value, params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in params.iter() {
        entries.push(TensorEntry {
            name: name.clone(),
            offset,
            shape: tensor.shape().to_vec(),
        });
        for &x in tensor.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        offset += tensor.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION.to_string(),
        config: config.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::data("checkpoint shorter than its length prefix"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(Error::data("checkpoint truncated inside the header"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[header_end..];
    let mut params = ParamSet::new();
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset * 4;
        let end = start + count * 4;
        if end > payload.len() {
            return Err(Error::data(format!(
                "checkpoint truncated inside tensor {}",
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&entry.name, Tensor::new(entry.shape.clone(), data));
    }
    Ok(Checkpoint {
        format_version: header.format_version,
        config: header.config,
        params,
    })
}

pub fn save(path: &Path, config: &serde_json::Value, params: &ParamSet<f32>) -> Result<()> {
    fs::write(path, to_bytes(config, params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
