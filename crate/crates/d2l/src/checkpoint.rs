//! Single-file tensor container used for model checkpoints and adapter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4    magic ("D2LC" for checkpoints, "D2LA" for adapters)
//! bytes 4..8    u32 header length H
//! bytes 8..8+H  JSON header (see `ContainerHeader`)
//! bytes 8+H..   payload: raw f32 tensor data, concatenated in header order
//! ```
//!
//! The header records the format version, an artifact kind tag, an arbitrary
//! JSON config blob, one entry per tensor (name, dtype, shape, byte offset
//! into the payload, byte length), and a CRC32 of the whole payload. Offsets
//! are relative to the payload start. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{D2lError, Result};
use crate::tensor_util::{device, to_f32_vec};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"D2LC";
pub const ADAPTER_MAGIC: [u8; 4] = *b"D2LA";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    /// What the payload is: "target_lm", "hypernet", "lora_adapter", "prefix_kv".
    pub kind: String,
    /// Arbitrary configuration blob describing the artifact.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_crc32: u32,
}

/// Serialize named tensors into a container byte buffer. Tensor order is
/// preserved as given; callers pass name-sorted lists for determinism.
pub fn write_container(
    magic: &[u8; 4],
    kind: &str,
    config: serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<Vec<u8>> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        let data = to_f32_vec(t)?;
        for v in &data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".to_string(),
            shape: t.dims().to_vec(),
            offset,
            byte_len: (data.len() * 4) as u64,
        });
    }
    let header = ContainerHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        tensors: entries,
        payload_crc32: crc32fast::hash(&payload),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse a container buffer, verifying magic, version, and payload CRC.
pub fn read_container(
    magic: &[u8; 4],
    bytes: &[u8],
) -> Result<(ContainerHeader, BTreeMap<String, Tensor>)> {
    if bytes.len() < 8 {
        return Err(D2lError::Format("container shorter than its fixed header".into()));
    }
    if &bytes[0..4] != magic {
        return Err(D2lError::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            magic
        )));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(D2lError::Format("truncated container header".into()));
    }
    let header: ContainerHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| D2lError::Format(format!("unparseable container header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(D2lError::Version(format!(
            "container format version {} (supported: {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &bytes[8 + header_len..];
    let crc = crc32fast::hash(payload);
    if crc != header.payload_crc32 {
        return Err(D2lError::Checksum(format!(
            "payload crc32 {crc:08x} != header {:08x}",
            header.payload_crc32
        )));
    }
    let mut map = BTreeMap::new();
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(D2lError::Format(format!("unsupported dtype {}", entry.dtype)));
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > payload.len() {
            return Err(D2lError::Format(format!(
                "tensor {} extends past payload end",
                entry.name
            )));
        }
        let n = entry.byte_len as usize / 4;
        let expected: usize = entry.shape.iter().product();
        if n != expected {
            return Err(D2lError::Format(format!(
                "tensor {}: {} values but shape {:?}",
                entry.name, n, entry.shape
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let t = Tensor::from_vec(data, entry.shape.as_slice(), &device())?;
        map.insert(entry.name.clone(), t);
    }
    Ok((header, map))
}

/// Write a checkpoint container to disk.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let bytes = write_container(&CHECKPOINT_MAGIC, kind, config, tensors)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a checkpoint container from disk.
pub fn load_checkpoint(path: &Path) -> Result<(ContainerHeader, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path)?;
    read_container(&CHECKPOINT_MAGIC, &bytes)
}
