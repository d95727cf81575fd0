use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_file, IoError};
use crate::metrics::AffectLabel;
use crate::train::{FeatureCache, SubjectFeatures};

const FEATURE_MAGIC: &[u8; 8] = b"ANCLAFZQ";

#[derive(Serialize, Deserialize)]
struct Header {
    zq_dim: usize,
    /// `(subject_id, frames)` in storage order.
    subjects: Vec<(u32, usize)>,
}

/// `magic | header length (u64 LE) | JSON header | per frame: zq then valence, arousal (f64 LE)`.
pub fn save_features(path: &Path, cache: &FeatureCache) -> Result<(), IoError> {
    let header = Header {
        zq_dim: cache.zq_dim,
        subjects: cache.subjects.iter().map(|s| (s.subject_id, s.frames())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for s in &cache.subjects {
        for (row, label) in s.zq.chunks(cache.zq_dim).zip(&s.labels) {
            for v in row.iter().chain([&label.valence, &label.arousal]) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    atomic_write(path, &out)
}

pub fn load_features(path: &Path) -> Result<FeatureCache, IoError> {
    let bytes = read_file(path)?;
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(IoError::format(path, "not a feature cache"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or(IoError::Truncated {
        needed: 16 + len,
        have: bytes.len(),
    })?;
    let header: Header = serde_json::from_slice(json)?;
    let row = header.zq_dim + 2;
    let total: usize = header.subjects.iter().map(|s| s.1).sum();
    let needed = 16 + len + total * row * 8;
    if bytes.len() != needed {
        return Err(IoError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    let mut values = bytes[16 + len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut subjects = Vec::with_capacity(header.subjects.len());
    for (subject_id, frames) in header.subjects {
        let mut zq = Vec::with_capacity(frames * header.zq_dim);
        let mut labels = Vec::with_capacity(frames);
        for _ in 0..frames {
            zq.extend(values.by_ref().take(header.zq_dim));
            let (v, a) = (values.next().expect("sized"), values.next().expect("sized"));
            labels.push(AffectLabel::new(v, a));
        }
        subjects.push(SubjectFeatures {
            subject_id,
            zq,
            labels,
        });
    }
    Ok(FeatureCache {
        zq_dim: header.zq_dim,
        subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cache = FeatureCache {
            zq_dim: 3,
            subjects: vec![
                SubjectFeatures {
                    subject_id: 4,
                    zq: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                    labels: vec![AffectLabel::new(0.5, -0.5), AffectLabel::new(0.0, 1.0)],
                },
                SubjectFeatures {
                    subject_id: 9,
                    zq: vec![1.0, 2.0, 3.0],
                    labels: vec![AffectLabel::new(-1.0, 0.25)],
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.zq");
        save_features(&path, &cache).unwrap();
        assert_eq!(load_features(&path).unwrap(), cache);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_features(&path).is_err());
    }
}
