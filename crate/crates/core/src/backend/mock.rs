//! Scripted generator for offline runs.
//!
//! The fixture is JSONL, one object per `(id, step)` key:
//!
//! ```text
//! {"id": "ex1", "step": 1, "replies": ["The aspect is taste."], "scores": [-0.2]}
//! ```
//!
//! Each request for a key consumes the next `n` replies. Asking for more than
//! remain is an error, so an under-scripted test fails loudly.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use async_trait::async_trait;
use serde::Deserialize;

use super::{BackendError, GenerationRequest, Generator, RawCompletion, RequestKey};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub id: String,
    pub step: u8,
    pub replies: Vec<String>,
    #[serde(default)]
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug)]
pub struct MockGenerator {
    script: Mutex<HashMap<RequestKey, VecDeque<RawCompletion>>>,
}

impl MockGenerator {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|source| BackendError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(line).map_err(|e| BackendError::BadFixture {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            entries.push((i + 1, entry));
        }
        if entries.is_empty() {
            return Err(BackendError::BadFixture {
                line: 0,
                reason: "fixture has no entries".into(),
            });
        }
        Self::from_entries(entries)
    }

    fn from_entries(
        entries: impl IntoIterator<Item = (usize, ScriptEntry)>,
    ) -> Result<Self, BackendError> {
        let mut script = HashMap::new();
        for (line, entry) in entries {
            let bad = |reason: String| BackendError::BadFixture { line, reason };
            if entry.id.is_empty() {
                return Err(bad("empty id".into()));
            }
            if entry.step > 3 {
                return Err(bad(format!("step must be 0..=3, got {}", entry.step)));
            }
            if entry.replies.is_empty() {
                return Err(bad("replies must not be empty".into()));
            }
            let scores = match entry.scores {
                Some(scores) if scores.len() != entry.replies.len() => {
                    return Err(bad(format!(
                        "{} scores for {} replies",
                        scores.len(),
                        entry.replies.len()
                    )))
                }
                Some(scores) if scores.iter().any(|s| !s.is_finite()) => {
                    return Err(bad("scores must be finite".into()))
                }
                Some(scores) => scores.into_iter().map(Some).collect(),
                None => vec![None; entry.replies.len()],
            };
            let key = RequestKey::new(entry.id, entry.step);
            if script.contains_key(&key) {
                return Err(bad(format!(
                    "duplicate key (`{}`, {})",
                    key.instance_id, key.step
                )));
            }
            let queue: VecDeque<_> = entry
                .replies
                .into_iter()
                .zip(scores)
                .map(|(text, score)| RawCompletion { text, score })
                .collect();
            script.insert(key, queue);
        }
        Ok(MockGenerator {
            script: Mutex::new(script),
        })
    }
}

#[async_trait]
impl Generator for MockGenerator {
    async fn sample(
        &self,
        key: &RequestKey,
        request: &GenerationRequest,
    ) -> Result<Vec<RawCompletion>, BackendError> {
        let mut script = self.script.lock().expect("mock script lock poisoned");
        let n = request.n as usize;
        match script.get_mut(key) {
            Some(queue) if queue.len() >= n => Ok(queue.drain(..n).collect()),
            _ => Err(BackendError::ScriptExhausted {
                id: key.instance_id.clone(),
                step: key.step,
            }),
        }
    }

    fn describe(&self) -> String {
        "mock".into()
    }
}
