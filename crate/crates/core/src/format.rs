//! On-disk feature streams.
//!
//! A stream is a JSON manifest plus one binary file per task split. Each
//! binary file starts with a 16-byte header (`b"ACLF"`, then little-endian
//! `u32` version = 1, row count, column count) followed by row-major
//! little-endian `f32` values. Columns are `feature_dim + 1`; the last column
//! holds the integer class label encoded as a float.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Split, Task, TaskStream};
use crate::error::{Error, Result, ValidationError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACLF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pre_embedded: bool,
    pub tasks: Vec<ManifestTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub train_file: String,
    pub test_file: String,
}

/// Encodes a split as an `ACLF` byte buffer.
pub fn encode_split(split: &Split) -> Vec<u8> {
    let dim = split.features.cols();
    let cols = dim + 1;
    let mut out = Vec::with_capacity(HEADER_LEN + split.len() * cols * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(split.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for s in split.samples() {
        for v in s.features {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(s.label as f32).to_le_bytes());
    }
    out
}

/// Decodes an `ACLF` buffer, checking the header against the expected feature dimension.
pub fn decode_split(bytes: &[u8], path: &Path, task_id: usize, feature_dim: usize) -> Result<Split> {
    let bad = |reason: &str| -> Error {
        ValidationError::BadHeader {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
        .into()
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad("file shorter than 16-byte header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("magic is not ACLF"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    if cols != feature_dim + 1 {
        return Err(ValidationError::DimensionMismatch {
            task_id,
            expected: feature_dim,
            actual: cols.saturating_sub(1),
        }
        .into());
    }
    let body = &bytes[HEADER_LEN..];
    let expected = rows * cols;
    if body.len() != expected * 4 {
        return Err(ValidationError::Size {
            path: path.to_path_buf(),
            expected,
            actual: body.len() / 4,
        }
        .into());
    }
    let mut features = Vec::with_capacity(rows * feature_dim);
    let mut labels = Vec::with_capacity(rows);
    for row in body.chunks_exact(cols * 4) {
        let mut vals = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        features.extend(vals.by_ref().take(feature_dim).map(f64::from));
        let label = vals.next().expect("label column");
        if !(label >= 0.0 && label.fract() == 0.0 && label.is_finite()) {
            return Err(ValidationError::BadLabel { task_id, value: label }.into());
        }
        labels.push(label as usize);
    }
    let features = Tensor::new(rows, feature_dim, features).map_err(|_| {
        Error::from(ValidationError::BadHeader {
            path: path.to_path_buf(),
            reason: "non-finite feature value".into(),
        })
    })?;
    Split::new(features, labels)
}

fn split_file_names(task_id: usize) -> (String, String) {
    (format!("task{task_id}_train.aclf"), format!("task{task_id}_test.aclf"))
}

/// Writes `manifest.json` and one file per split into `dir`; returns the manifest path.
pub fn write_feature_stream(stream: &TaskStream, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tasks = Vec::new();
    for task in stream.all_tasks() {
        if task.task_id == 0 && task.classes.is_empty() {
            continue;
        }
        let (train_file, test_file) = split_file_names(task.task_id);
        for (name, split) in [(&train_file, &task.train), (&test_file, &task.test)] {
            let path = dir.join(name);
            fs::write(&path, encode_split(split)).map_err(|e| Error::io(&path, e))?;
        }
        tasks.push(ManifestTask {
            task_id: task.task_id,
            classes: task.classes.clone(),
            train_file,
            test_file,
        });
    }
    let manifest = Manifest {
        feature_dim: stream.feature_dim,
        pre_embedded: stream.pre_embedded,
        tasks,
    };
    let path = dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads and validates a stream. Data file paths are relative to the manifest's directory.
pub fn load_feature_stream(manifest_path: &Path) -> Result<TaskStream> {
    if !manifest_path.is_file() {
        return Err(ValidationError::MissingFile {
            path: manifest_path.to_path_buf(),
        }
        .into());
    }
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ValidationError::Manifest(e.to_string()))?;
    if manifest.feature_dim == 0 {
        return Err(ValidationError::Manifest("feature_dim must be >= 1".into()).into());
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));

    // Class-set disjointness is checked before any data file is read.
    let mut entries = manifest.tasks.clone();
    entries.sort_by_key(|t| t.task_id);
    for w in entries.windows(2) {
        if w[0].task_id == w[1].task_id {
            return Err(ValidationError::Manifest(format!("task id {} listed twice", w[0].task_id)).into());
        }
    }
    for (i, a) in entries.iter().enumerate() {
        for b in &entries[i + 1..] {
            let shared: Vec<usize> = {
                let mut s: Vec<usize> = a.classes.iter().copied().filter(|c| b.classes.contains(c)).collect();
                s.sort_unstable();
                s.dedup();
                s
            };
            if !shared.is_empty() {
                return Err(ValidationError::Overlap {
                    first: a.task_id,
                    second: b.task_id,
                    shared,
                }
                .into());
            }
        }
    }

    let mut base = None;
    let mut incremental = Vec::new();
    for entry in entries {
        let mut classes = entry.classes.clone();
        classes.sort_unstable();
        if classes.windows(2).any(|w| w[0] == w[1]) {
            return Err(ValidationError::Manifest(format!(
                "task {} lists a class twice",
                entry.task_id
            ))
            .into());
        }
        let read = |name: &str| -> Result<Split> {
            let path = root.join(name);
            if !path.is_file() {
                return Err(ValidationError::MissingFile { path }.into());
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            decode_split(&bytes, &path, entry.task_id, manifest.feature_dim)
        };
        let task = Task {
            task_id: entry.task_id,
            classes,
            train: read(&entry.train_file)?,
            test: read(&entry.test_file)?,
        };
        if task.task_id == 0 {
            base = Some(task);
        } else {
            incremental.push(task);
        }
    }
    let base = match base {
        Some(b) => b,
        None if manifest.pre_embedded => Task {
            task_id: 0,
            classes: Vec::new(),
            train: Split::empty(manifest.feature_dim),
            test: Split::empty(manifest.feature_dim),
        },
        None => {
            return Err(ValidationError::Manifest(
                "no base task (task_id 0); required unless pre_embedded".into(),
            )
            .into())
        }
    };
    if incremental.is_empty() {
        return Err(ValidationError::Manifest("no incremental tasks".into()).into());
    }
    TaskStream::new(base, incremental, manifest.feature_dim, manifest.pre_embedded)
}
