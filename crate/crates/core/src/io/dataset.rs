use std::path::Path;

use super::{atomic_write, read_file, to_json_bytes, IoError};
use crate::metrics::AffectLabel;
use crate::model::quadrant_of;
use crate::synth::{Dataset, FrameRecord, Manifest, SubjectData};

pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_BYTES: usize = 16;

fn subject_bytes(subject: &SubjectData, width: usize, height: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + subject.frames.len() * (width * height + 16));
    for v in [subject.subject_id, subject.frames.len() as u32, width as u32, height as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in &subject.frames {
        out.extend(f.image.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.extend_from_slice(&f.label.valence.to_le_bytes());
        out.extend_from_slice(&f.label.arousal.to_le_bytes());
    }
    out
}

/// Writes `manifest.json` and one binary file per subject. Per subject file:
/// `subject_id, frames, width, height` as u32 LE, then per frame the 8-bit
/// row-major pixels followed by valence and arousal as f64 LE.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<(), IoError> {
    let m = &dataset.manifest;
    for (entry, subject) in m.subjects.iter().zip(&dataset.subjects) {
        atomic_write(&dir.join(&entry.file), &subject_bytes(subject, m.width, m.height))?;
    }
    atomic_write(&dir.join(MANIFEST_FILE), &to_json_bytes(m)?)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn f64_at(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)?;
    let pixels = manifest.width * manifest.height;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let path = dir.join(&entry.file);
        let bytes = read_file(&path)?;
        if bytes.len() < HEADER_BYTES {
            return Err(IoError::Truncated {
                needed: HEADER_BYTES,
                have: bytes.len(),
            });
        }
        let (id, frames, w, h) = (u32_at(&bytes, 0), u32_at(&bytes, 4) as usize, u32_at(&bytes, 8), u32_at(&bytes, 12));
        if id != entry.subject_id || frames != entry.frames || w as usize != manifest.width || h as usize != manifest.height
        {
            return Err(IoError::format(&path, "header disagrees with the manifest"));
        }
        let record = pixels + 16;
        let needed = HEADER_BYTES + frames * record;
        if bytes.len() != needed {
            return Err(IoError::Truncated {
                needed,
                have: bytes.len(),
            });
        }
        let mut out = Vec::with_capacity(frames);
        for i in 0..frames {
            let at = HEADER_BYTES + i * record;
            let image = bytes[at..at + pixels].iter().map(|&b| b as f64 / 255.0).collect();
            let label = AffectLabel::new(f64_at(&bytes, at + pixels), f64_at(&bytes, at + pixels + 8));
            if !label.is_valid() {
                return Err(IoError::format(&path, format!("frame {i} has label outside [-1, 1]")));
            }
            out.push(FrameRecord {
                subject_id: id,
                frame_index: i as u32,
                image,
                label,
                quadrant: quadrant_of(&label)?,
            });
        }
        subjects.push(SubjectData {
            subject_id: id,
            frames: out,
        });
    }
    Ok(Dataset { manifest, subjects })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_dataset;

    #[test]
    fn round_trip_is_lossless() {
        let d = gen_dataset(5, 7, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &d).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn truncated_subject_file_is_an_error() {
        let d = gen_dataset(5, 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &d).unwrap();
        let path = dir.path().join(&d.manifest.subjects[2].file);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(IoError::Truncated { .. })));
    }
}
