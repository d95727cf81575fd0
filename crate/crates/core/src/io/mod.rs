//! On-disk formats: datasets, checkpoints, feature caches, traces and reports.
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! reader never observes a partial file.

mod checkpoint;
mod dataset;
mod features;
mod trace;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, RngState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{load_dataset, save_dataset, MANIFEST_FILE};
pub use features::{load_features, save_features};
pub use trace::{read_trace, trace_header, trace_subject, write_trace, TraceRow};

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::metrics::MetricReport;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("unsupported format version {found} (this build reads {expected})")]
    Version { found: u64, expected: u64 },
    #[error("truncated data: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, reason: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| IoError::io(path, e))?;
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<S: serde::Serialize>(value: &S) -> Result<Vec<u8>, IoError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<(), IoError> {
    atomic_write(path, &to_json_bytes(report)?)
}

pub fn read_report(path: &Path) -> Result<MetricReport, IoError> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("a.txt");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
