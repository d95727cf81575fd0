use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_file, IoError};
use crate::model::{AnclafModel, Architecture};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{FoldInfo, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ANCLAFCK";
pub const CHECKPOINT_VERSION: u64 = 1;

/// Position of the stage's random stream when the checkpoint was written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string: JSON numbers cannot carry the full u128 range.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub fold: Option<FoldInfo>,
    pub config: TrainConfig,
    pub rng: Option<RngState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: AnclafModel<T>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the array block, in values.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u64,
    architecture: Architecture,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

/// `magic | header length (u64 LE) | JSON header | parameter values (f64 LE)`.
pub fn checkpoint_to_bytes<T: Scalar>(model: &AnclafModel<T>, meta: &CheckpointMeta) -> Result<Vec<u8>, IoError> {
    let mut params = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (_, name, t) in model.params.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        architecture: model.arch.clone(),
        meta: meta.clone(),
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize) -> Result<&'a [u8], IoError> {
    bytes.get(at..at + len).ok_or(IoError::Truncated {
        needed: at + len,
        have: bytes.len(),
    })
}

/// Parses a whole checkpoint; nothing is returned unless every part is valid.
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, IoError> {
    let here = Path::new("<checkpoint>");
    if take(bytes, 0, 8)? != CHECKPOINT_MAGIC {
        return Err(IoError::format(here, "not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().expect("8 bytes")) as usize;
    let json = take(bytes, 16, len)?;
    let raw: serde_json::Value = serde_json::from_slice(json)?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| IoError::format(here, "header has no format_version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw)?;
    let body = 16 + len;
    let mut store = ParamStore::new();
    for p in &header.params {
        let count: usize = p.shape.iter().product();
        let raw = take(bytes, body + p.offset * 8, count * 8)?;
        let data: Vec<T> = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let tensor = Tensor::new(&p.shape, data).map_err(|e| IoError::format(here, e.to_string()))?;
        store
            .add(p.name.clone(), tensor)
            .map_err(|e| IoError::format(here, e.to_string()))?;
    }
    let expected = body + header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>() * 8;
    if bytes.len() != expected {
        return Err(IoError::format(
            here,
            format!("{} trailing bytes after the parameter block", bytes.len() as i64 - expected as i64),
        ));
    }
    let model = AnclafModel::from_params(header.architecture, store)?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &AnclafModel<T>, meta: &CheckpointMeta) -> Result<(), IoError> {
    atomic_write(path, &checkpoint_to_bytes(model, meta)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, IoError> {
    let bytes = read_file(path)?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        IoError::Format { reason, .. } => IoError::format(path, reason),
        other => other,
    })
}
