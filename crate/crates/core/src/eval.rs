//! Per-class and macro F1 over all instances and over the implicit subset.
//!
//! Macro-F1 averages the three classes with equal weight. A class with no
//! true positives (including one absent from both gold and predictions)
//! scores F1 = 0. Failed and missing traces are left out of the metrics and
//! counted in [`Counts::n_failed`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainConfig, ChainTrace, Mode, TraceFlag};
use crate::dataset::Dataset;
use crate::extraction::Polarity;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trace for unknown instance `{0}`")]
    UnknownId(String),
    #[error("more than one trace for instance `{0}`")]
    DuplicateTrace(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a valid report: {source}")]
    SchemaMismatch {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn class_index(p: Polarity) -> usize {
    match p {
        Polarity::Positive => 0,
        Polarity::Neutral => 1,
        Polarity::Negative => 2,
    }
}

/// Rows are gold labels, columns predictions, in [`Polarity::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Polarity, Polarity)>) -> Self {
        let mut m = ConfusionMatrix::default();
        for (gold, pred) in pairs {
            m.counts[class_index(gold)][class_index(pred)] += 1;
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn class_scores(&self, class: Polarity) -> ClassScores {
        let c = class_index(class);
        let tp = self.counts[c][c];
        let predicted: u64 = (0..3).map(|g| self.counts[g][c]).sum();
        let actual: u64 = self.counts[c].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores {
            precision,
            recall,
            f1,
        }
    }

    pub fn per_class(&self) -> BTreeMap<Polarity, ClassScores> {
        Polarity::ALL
            .into_iter()
            .map(|p| (p, self.class_scores(p)))
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        Polarity::ALL
            .into_iter()
            .map(|p| self.class_scores(p).f1)
            .sum::<f64>()
            / 3.0
    }

    /// Equals accuracy for single-label classification.
    pub fn micro_f1(&self) -> f64 {
        let correct: u64 = (0..3).map(|c| self.counts[c][c]).sum();
        ratio(correct, self.total())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    /// Evaluable instances.
    pub n_all: usize,
    /// Evaluable implicit instances.
    pub n_isa: usize,
    /// Evaluable instances whose final answer named no polarity.
    pub n_unparseable: usize,
    /// Failed runs plus instances without a trace.
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<Polarity, ClassScores>,
    pub per_class_isa: BTreeMap<Polarity, ClassScores>,
    pub macro_f1_all: f64,
    pub macro_f1_isa: f64,
    pub micro_f1_all: f64,
    pub micro_f1_isa: f64,
    pub counts: Counts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ChainConfig>,
}

/// Scores traces against the dataset's gold labels.
pub fn evaluate(traces: &[ChainTrace], dataset: &Dataset) -> Result<EvalReport, EvalError> {
    let mut by_id: HashMap<&str, &ChainTrace> = HashMap::with_capacity(traces.len());
    for trace in traces {
        if dataset.get(&trace.instance_id).is_none() {
            return Err(EvalError::UnknownId(trace.instance_id.clone()));
        }
        if by_id.insert(trace.instance_id.as_str(), trace).is_some() {
            return Err(EvalError::DuplicateTrace(trace.instance_id.clone()));
        }
    }

    let mut all = Vec::new();
    let mut isa = Vec::new();
    let mut counts = Counts::default();
    for instance in &dataset.instances {
        let prediction = by_id
            .get(instance.id.as_str())
            .and_then(|t| t.prediction.filter(|_| !t.is_failed()).map(|p| (t, p)));
        let Some((trace, pred)) = prediction else {
            counts.n_failed += 1;
            continue;
        };
        if trace.flags.contains(&TraceFlag::Unparseable) {
            counts.n_unparseable += 1;
        }
        all.push((instance.gold, pred));
        if instance.implicit {
            isa.push((instance.gold, pred));
        }
    }
    let missing = dataset.len() - by_id.len();
    if missing > 0 {
        tracing::warn!(missing, "instances without a trace counted as failed");
    }
    counts.n_all = all.len();
    counts.n_isa = isa.len();

    let all = ConfusionMatrix::from_pairs(all);
    let isa = ConfusionMatrix::from_pairs(isa);
    Ok(EvalReport {
        per_class: all.per_class(),
        per_class_isa: isa.per_class(),
        macro_f1_all: all.macro_f1(),
        macro_f1_isa: isa.macro_f1(),
        micro_f1_all: all.micro_f1(),
        micro_f1_isa: isa.micro_f1(),
        counts,
        mode: traces.first().map(|t| t.mode),
        config: traces.first().map(|t| t.config.clone()),
    })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| EvalError::SchemaMismatch {
        path: path.to_path_buf(),
        source,
    })
}
