//! TABX checkpoint files.
//!
//! Layout: `b"TABX"`, version byte (1), JSON header (`{"spec":…,"meta":…}`),
//! u64 little-endian count of weights, then that many little-endian IEEE-754
//! f64 values in parameter-layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError, ModelSpec};
use crate::engine::Tensor;

const MAGIC: &[u8; 4] = b"TABX";
const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    /// Clean accuracy on the held-out test split, if trained.
    pub clean_test_accuracy: Option<f64>,
    /// Accuracy under the inner attack (adversarially trained checkpoints).
    pub robust_accuracy: Option<f64>,
    #[serde(default)]
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub meta: TrainMeta,
}

pub fn encode(model: &Model) -> Result<Vec<u8>, ModelError> {
    let header = CheckpointHeader { spec: model.spec.clone(), meta: model.meta.clone() };
    let mut out = Vec::with_capacity(64 + 8 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&serde_json::to_vec(&header)?);
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for p in &model.params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), ModelError> {
    if bytes.len() < 5 {
        return Err(ModelError::Truncated("missing preamble".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(ModelError::Version(bytes[4]));
    }
    let mut stream = serde_json::Deserializer::from_slice(&bytes[5..]).into_iter::<CheckpointHeader>();
    let header = match stream.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) if e.is_eof() => return Err(ModelError::Truncated("header".into())),
        Some(Err(e)) => return Err(e.into()),
        None => return Err(ModelError::Truncated("header".into())),
    };
    Ok((header, 5 + stream.byte_offset()))
}

pub fn decode(bytes: &[u8]) -> Result<Model, ModelError> {
    let (header, mut pos) = parse_header(bytes)?;
    let count_bytes = bytes
        .get(pos..pos + 8)
        .ok_or_else(|| ModelError::Truncated("blob length".into()))?;
    let count = u64::from_le_bytes(count_bytes.try_into().unwrap()) as usize;
    pos += 8;
    let expected = header.spec.param_count();
    if count != expected {
        return Err(ModelError::BlobLength { blob: count, expected });
    }
    let blob = &bytes[pos..];
    if blob.len() < 8 * count {
        return Err(ModelError::Truncated(format!("blob has {} of {} bytes", blob.len(), 8 * count)));
    }
    if blob.len() > 8 * count {
        return Err(ModelError::BlobLength { blob: blob.len() / 8, expected });
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params = header
        .spec
        .param_layout()
        .into_iter()
        .map(|info| {
            let n: usize = info.shape.iter().product();
            Tensor::new(info.shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Model::from_parts(header.spec, header.meta, params)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    decode(&fs::read(path)?)
}

/// Reads only the header (spec and training metadata).
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader, ModelError> {
    use std::io::Read;
    let mut buf = Vec::new();
    let mut f = fs::File::open(path)?;
    let mut chunk = [0u8; 4096];
    loop {
        let n = f.read(&mut chunk)?;
        buf.extend_from_slice(&chunk[..n]);
        match parse_header(&buf) {
            Ok((h, _)) => return Ok(h),
            Err(ModelError::Truncated(_)) if n > 0 => continue,
            Err(e) => return Err(e),
        }
    }
}
