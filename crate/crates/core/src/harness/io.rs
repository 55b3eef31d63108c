//! TABA adversarial-batch files.
//!
//! Layout mirrors the TABX checkpoints: `b"TABA"`, version byte (1), a JSON
//! [`BatchHeader`], u64 little-endian value count, then that many
//! little-endian f64 image values (`[N, 3, S, S]`, row-major).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError};
use crate::attack::AttackSpec;
use crate::engine::Tensor;

const MAGIC: &[u8; 4] = b"TABA";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchHeader {
    pub substitute: String,
    pub method: String,
    pub backend: String,
    pub spec: AttackSpec,
    pub shape: Vec<usize>,
    pub labels: Vec<usize>,
    /// Dataset indices of the benign sources.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvBatch {
    pub header: BatchHeader,
    pub images: Tensor,
}

pub fn encode_batch(batch: &AdvBatch) -> Result<Vec<u8>, HarnessError> {
    let mut out = Vec::with_capacity(256 + 8 * batch.images.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&serde_json::to_vec(&batch.header)?);
    out.extend_from_slice(&(batch.images.numel() as u64).to_le_bytes());
    for v in batch.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_batch(bytes: &[u8]) -> Result<AdvBatch, HarnessError> {
    let bad = |m: &str| HarnessError::BatchFormat(m.into());
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(bad("missing TABA magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad("unsupported version"));
    }
    let mut stream = serde_json::Deserializer::from_slice(&bytes[5..]).into_iter::<BatchHeader>();
    let header = stream.next().ok_or_else(|| bad("missing header"))??;
    let pos = 5 + stream.byte_offset();
    let count = bytes.get(pos..pos + 8).ok_or_else(|| bad("missing value count"))?;
    let count = u64::from_le_bytes(count.try_into().expect("8 bytes")) as usize;
    let blob = &bytes[pos + 8..];
    if blob.len() != 8 * count || header.shape.iter().product::<usize>() != count {
        return Err(bad("value count does not match the header shape"));
    }
    let data = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let images = Tensor::new(header.shape.clone(), data)?;
    Ok(AdvBatch { header, images })
}

pub fn save_batch(batch: &AdvBatch, path: &Path) -> Result<(), HarnessError> {
    fs::write(path, encode_batch(batch)?).map_err(io_err(path))
}

pub fn load_batch(path: &Path) -> Result<AdvBatch, HarnessError> {
    decode_batch(&fs::read(path).map_err(io_err(path))?)
}
