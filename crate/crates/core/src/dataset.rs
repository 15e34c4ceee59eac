//! Labeled sentence/target datasets in flat JSONL.
//!
//! ```text
//! {"id": "r1", "sentence": "...", "target": "...", "polarity": "positive", "implicit": true}
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::Polarity;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub sentence: String,
    pub target: String,
    #[serde(rename = "polarity")]
    pub gold: Polarity,
    /// The opinion has to be inferred rather than read off the text.
    pub implicit: bool,
}

impl Instance {
    fn check(&self) -> Result<(), String> {
        for (name, value) in [
            ("id", &self.id),
            ("sentence", &self.sentence),
            ("target", &self.target),
        ] {
            if value.trim().is_empty() {
                return Err(format!("`{name}` is empty"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Parses JSONL text; blank lines are skipped.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, DataError> {
        let mut instances = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let instance: Instance =
                serde_json::from_str(line).map_err(|e| DataError::BadRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            instance.check().map_err(|reason| DataError::BadRecord {
                line: line_no,
                reason,
            })?;
            if !seen.insert(instance.id.clone()) {
                return Err(DataError::DuplicateId {
                    line: line_no,
                    id: instance.id,
                });
            }
            instances.push(instance);
        }
        Ok(Dataset {
            name: name.into(),
            instances,
        })
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for instance in &self.instances {
            serde_json::to_writer(&mut out, instance)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loads a dataset, naming it after the file stem.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::parse(name, &text)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    dataset.write_jsonl(&mut file).map_err(io_err)?;
    file.flush().map_err(io_err)
}
