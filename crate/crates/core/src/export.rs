//! Supervised revising examples from three-hop traces.
//!
//! Each successful trace yields three records labelled with the gold
//! polarity: `C1 A` + final question, `C2 O` + final question, and the hop-3
//! prompt itself.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainTrace, Mode};
use crate::dataset::Dataset;
use crate::extraction::Polarity;
use crate::prompt::{
    assemble_revising_prompt, build_hop_prompt, extend_context, HopInput, PromptError,
};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("trace `{instance_id}` has mode {mode}; export needs thor traces")]
    ModeMismatch { instance_id: String, mode: Mode },
    #[error("trace for unknown instance `{0}`")]
    UnknownId(String),
    #[error("trace `{instance_id}` step {step} does not match its instance: {reason}")]
    Inconsistent {
        instance_id: String,
        step: u8,
        reason: String,
    },
    #[error("trace `{instance_id}`: {source}")]
    Prompt {
        instance_id: String,
        #[source]
        source: PromptError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub input: String,
    pub target_label: Polarity,
    pub instance_id: String,
    pub step: u8,
}

/// Builds the training records, three per successful trace.
///
/// Contexts are rebuilt from the instance and the selected answers and must
/// reproduce the prompts stored in the trace. Failed traces are skipped.
pub fn export_finetune(
    traces: &[ChainTrace],
    dataset: &Dataset,
) -> Result<Vec<TrainingRecord>, ExportError> {
    let mut records = Vec::with_capacity(traces.len() * 3);
    for trace in traces {
        if trace.mode != Mode::Thor {
            return Err(ExportError::ModeMismatch {
                instance_id: trace.instance_id.clone(),
                mode: trace.mode,
            });
        }
        if trace.is_failed() {
            tracing::warn!(instance = %trace.instance_id, "skipping failed trace");
            continue;
        }
        let instance = dataset
            .get(&trace.instance_id)
            .ok_or_else(|| ExportError::UnknownId(trace.instance_id.clone()))?;
        let id = &trace.instance_id;
        let prompt_err = |source| ExportError::Prompt {
            instance_id: id.clone(),
            source,
        };
        let mismatch = |step: u8, reason: &str| ExportError::Inconsistent {
            instance_id: id.clone(),
            step,
            reason: reason.to_string(),
        };
        let [hop1, hop2, hop3] = trace.hops.as_slice() else {
            return Err(mismatch(0, "expected exactly three hops"));
        };
        let target = instance.target.as_str();
        let record = |step: u8, input: String| TrainingRecord {
            input,
            target_label: instance.gold,
            instance_id: id.clone(),
            step,
        };

        let (p1, c1) = build_hop_prompt(1, HopInput::Sentence(&instance.sentence), target)
            .map_err(prompt_err)?;
        if p1.as_str() != hop1.prompt {
            return Err(mismatch(1, "prompt differs from the rebuilt hop-1 prompt"));
        }
        let answer = hop1.selected.text.as_str();
        records.push(record(
            1,
            assemble_revising_prompt(1, &c1, answer, target)
                .map_err(prompt_err)?
                .into_string(),
        ));

        let c1 = extend_context(&c1, answer).map_err(prompt_err)?;
        let (p2, c2) = build_hop_prompt(2, HopInput::Context(&c1), target).map_err(prompt_err)?;
        if p2.as_str() != hop2.prompt {
            return Err(mismatch(2, "prompt differs from the rebuilt hop-2 prompt"));
        }
        let answer = hop2.selected.text.as_str();
        records.push(record(
            2,
            assemble_revising_prompt(2, &c2, answer, target)
                .map_err(prompt_err)?
                .into_string(),
        ));

        let c2 = extend_context(&c2, answer).map_err(prompt_err)?;
        let (p3, _) = build_hop_prompt(3, HopInput::Context(&c2), target).map_err(prompt_err)?;
        if p3.as_str() != hop3.prompt {
            return Err(mismatch(3, "prompt differs from the rebuilt hop-3 prompt"));
        }
        records.push(record(3, hop3.prompt.clone()));
    }
    Ok(records)
}

pub fn write_training_jsonl(mut out: impl Write, records: &[TrainingRecord]) -> io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
