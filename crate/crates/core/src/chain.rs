//! Runs instances through the vanilla, zero-shot CoT and three-hop modes.
//!
//! A three-hop run asks for the aspect, then the implicit opinion, then the
//! polarity. Every hop samples `k` candidates, votes over them and carries
//! the winning answer into the next hop's context. The full record of prompts,
//! candidates and selections is kept in a [`ChainTrace`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, Candidate, GenerationRequest, RequestKey};
use crate::consistency::{
    cluster_candidates, select_answer, CandidateCluster, VoteError, VotingConfig, UNPARSEABLE_KEY,
};
use crate::dataset::{Dataset, Instance};
use crate::extraction::{extract_polarity, normalize_text, Polarity};
use crate::prompt::{
    build_hop_prompt, build_vanilla_prompt, build_zerocot_prompt, extend_context, HopInput,
    PromptError, PromptText,
};

/// Step recorded for the single hop of vanilla and zero-shot CoT runs.
pub const SINGLE_PROMPT_STEP: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Zerocot,
    Thor,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Zerocot => "zerocot",
            Mode::Thor => "thor",
        }
    }

    pub fn hop_count(self) -> usize {
        match self {
            Mode::Thor => 3,
            Mode::Vanilla | Mode::Zerocot => 1,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "zerocot" => Ok(Mode::Zerocot),
            "thor" => Ok(Mode::Thor),
            other => Err(format!(
                "unknown mode `{other}` (expected vanilla, zerocot or thor)"
            )),
        }
    }
}

fn default_temperature() -> f64 {
    0.9
}
fn default_max_tokens() -> u32 {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingParams {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Forwarded to the endpoint and recorded; decoding itself happens
    /// server-side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            seed: None,
        }
    }
}

/// Voting and decoding settings; copied into every trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ChainConfig {
    pub voting: VotingConfig,
    pub decoding: DecodingParams,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), ChainError> {
        self.voting
            .validate()
            .map_err(|e| ChainError::Config(e.to_string()))?;
        let d = &self.decoding;
        if !d.temperature.is_finite() || d.temperature < 0.0 {
            return Err(ChainError::Config(format!(
                "temperature must be non-negative, got {}",
                d.temperature
            )));
        }
        if d.temperature == 0.0 && self.voting.k > 1 {
            return Err(ChainError::Config(
                "temperature 0 is greedy decoding; it requires k = 1".into(),
            ));
        }
        if d.max_tokens == 0 {
            return Err(ChainError::Config("max_tokens must be at least 1".into()));
        }
        Ok(())
    }

    fn request(&self, prompt: PromptText) -> GenerationRequest {
        GenerationRequest {
            prompt,
            n: self.voting.k,
            temperature: self.decoding.temperature,
            max_tokens: self.decoding.max_tokens,
            seed: self.decoding.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub step: u8,
    pub prompt: String,
    pub candidates: Vec<Candidate>,
    pub selected: Candidate,
    pub consistency_flag: bool,
    /// The hop's context extended with the selected answer.
    pub context_after: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFlag {
    /// No final candidate named a polarity; the prediction fell back to neutral.
    Unparseable,
    /// Some hop's winning cluster was below `min_cluster`.
    LowConsistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub instance_id: String,
    pub mode: Mode,
    pub hops: Vec<HopRecord>,
    /// `None` only for failed runs.
    pub prediction: Option<Polarity>,
    pub flags: BTreeSet<TraceFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub config: ChainConfig,
}

impl ChainTrace {
    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("invalid chain config: {0}")]
    Config(String),
    #[error("instance `{id}`: {source}")]
    InvalidInstance {
        id: String,
        #[source]
        source: PromptError,
    },
    #[error("instance `{}` step {step}: {source}", partial.instance_id)]
    Backend {
        step: u8,
        #[source]
        source: BackendError,
        /// Hops completed before the failure, marked failed.
        partial: Box<ChainTrace>,
    },
}

impl ChainError {
    /// The failed-marked trace recorded in place of a successful run.
    pub fn into_failed_trace(
        self,
        instance: &Instance,
        mode: Mode,
        config: &ChainConfig,
    ) -> ChainTrace {
        match self {
            ChainError::Backend { partial, .. } => *partial,
            other => ChainTrace {
                instance_id: instance.id.clone(),
                mode,
                hops: Vec::new(),
                prediction: None,
                flags: BTreeSet::new(),
                failure: Some(other.to_string()),
                config: config.clone(),
            },
        }
    }
}

struct Vote {
    selected: Candidate,
    consistent: bool,
    key: String,
}

fn text_key(c: &Candidate) -> String {
    let key = normalize_text(&c.text);
    if key.is_empty() {
        UNPARSEABLE_KEY.to_string()
    } else {
        key
    }
}

fn polarity_key(c: &Candidate) -> String {
    extract_polarity(&c.text)
        .polarity
        .map_or_else(|| UNPARSEABLE_KEY.to_string(), |p| p.as_str().to_string())
}

fn vote(
    candidates: &[Candidate],
    voting: &VotingConfig,
    key_of: fn(&Candidate) -> String,
) -> Result<Vote, VoteError> {
    let clusters: Vec<CandidateCluster> = cluster_candidates(candidates, key_of)?;
    match select_answer(&clusters, voting) {
        Ok(sel) => Ok(Vote {
            selected: sel.candidate,
            consistent: sel.consistent,
            key: sel.key,
        }),
        Err(VoteError::AllUnparseable) => Ok(Vote {
            selected: clusters[0].best().candidate.clone(),
            consistent: false,
            key: UNPARSEABLE_KEY.to_string(),
        }),
        Err(e) => Err(e),
    }
}

struct Run<'a> {
    instance: &'a Instance,
    backend: &'a Backend,
    mode: Mode,
    config: &'a ChainConfig,
    hops: Vec<HopRecord>,
    flags: BTreeSet<TraceFlag>,
}

impl Run<'_> {
    fn invalid(&self, source: PromptError) -> ChainError {
        ChainError::InvalidInstance {
            id: self.instance.id.clone(),
            source,
        }
    }

    fn trace(self, prediction: Option<Polarity>, failure: Option<String>) -> ChainTrace {
        ChainTrace {
            instance_id: self.instance.id.clone(),
            mode: self.mode,
            hops: self.hops,
            prediction,
            flags: self.flags,
            failure,
            config: self.config.clone(),
        }
    }

    async fn sample(
        &mut self,
        step: u8,
        prompt: &PromptText,
    ) -> Result<Vec<Candidate>, ChainError> {
        let key = RequestKey::new(self.instance.id.clone(), step);
        match self
            .backend
            .generate(&key, &self.config.request(prompt.clone()))
            .await
        {
            Ok(c) => Ok(c),
            Err(source) => {
                let failure = format!("step {step}: {source}");
                let partial = Run {
                    hops: std::mem::take(&mut self.hops),
                    flags: std::mem::take(&mut self.flags),
                    ..*self
                }
                .trace(None, Some(failure));
                Err(ChainError::Backend {
                    step,
                    source,
                    partial: Box::new(partial),
                })
            }
        }
    }

    fn vote(&self, candidates: &[Candidate], key_of: fn(&Candidate) -> String) -> Vote {
        vote(candidates, &self.config.voting, key_of).expect("backend returns k >= 1 candidates")
    }

    /// Samples the polarity question and votes by extracted label.
    async fn polarity_hop(
        &mut self,
        step: u8,
        prompt: PromptText,
        context: &str,
    ) -> Result<Polarity, ChainError> {
        let candidates = self.sample(step, &prompt).await?;
        let vote = self.vote(&candidates, polarity_key);
        let prediction = match vote.key.parse::<Polarity>() {
            Ok(p) => {
                if !vote.consistent {
                    self.flags.insert(TraceFlag::LowConsistency);
                }
                p
            }
            Err(_) => {
                self.flags.insert(TraceFlag::Unparseable);
                Polarity::Neutral
            }
        };
        self.hops.push(HopRecord {
            step,
            prompt: prompt.into_string(),
            candidates,
            context_after: format!("{context} {}", vote.selected.text),
            selected: vote.selected,
            consistency_flag: vote.consistent,
        });
        Ok(prediction)
    }

    async fn single_prompt(&mut self, zero_cot: bool) -> Result<Polarity, ChainError> {
        let inst = self.instance;
        let prompt = if zero_cot {
            build_zerocot_prompt(&inst.sentence, &inst.target)
        } else {
            build_vanilla_prompt(&inst.sentence, &inst.target)
        }
        .map_err(|e| self.invalid(e))?;
        let context = prompt.as_str().to_string();
        self.polarity_hop(SINGLE_PROMPT_STEP, prompt, &context)
            .await
    }

    async fn three_hop(&mut self) -> Result<Polarity, ChainError> {
        let inst = self.instance;
        let target = inst.target.as_str();

        let (prompt, c1) = build_hop_prompt(1, HopInput::Sentence(&inst.sentence), target)
            .map_err(|e| self.invalid(e))?;
        let candidates = self.sample(1, &prompt).await?;
        let aspect = self.vote(&candidates, text_key);
        let c1 = extend_context(&c1, &aspect.selected.text).map_err(|e| self.invalid(e))?;
        self.push_text_hop(1, prompt, candidates, aspect, c1.text());

        let (prompt, c2) =
            build_hop_prompt(2, HopInput::Context(&c1), target).map_err(|e| self.invalid(e))?;
        let candidates = self.sample(2, &prompt).await?;
        let opinion = self.vote(&candidates, text_key);
        let c2 = extend_context(&c2, &opinion.selected.text).map_err(|e| self.invalid(e))?;
        self.push_text_hop(2, prompt, candidates, opinion, c2.text());

        let (prompt, c3) =
            build_hop_prompt(3, HopInput::Context(&c2), target).map_err(|e| self.invalid(e))?;
        self.polarity_hop(3, prompt, c3.text()).await
    }

    fn push_text_hop(
        &mut self,
        step: u8,
        prompt: PromptText,
        candidates: Vec<Candidate>,
        vote: Vote,
        context_after: &str,
    ) {
        if !vote.consistent {
            self.flags.insert(TraceFlag::LowConsistency);
        }
        self.hops.push(HopRecord {
            step,
            prompt: prompt.into_string(),
            candidates,
            selected: vote.selected,
            consistency_flag: vote.consistent,
            context_after: context_after.to_string(),
        });
    }
}

/// Runs one instance to completion.
///
/// Backend failures come back as [`ChainError::Backend`] carrying the partial
/// trace; unparseable answers never fail the run.
pub async fn run_chain(
    instance: &Instance,
    backend: &Backend,
    mode: Mode,
    config: &ChainConfig,
) -> Result<ChainTrace, ChainError> {
    config.validate()?;
    if !instance.sentence.contains(instance.target.as_str()) {
        tracing::warn!(
            instance = %instance.id,
            target = %instance.target,
            "target does not occur verbatim in the sentence"
        );
    }
    let mut run = Run {
        instance,
        backend,
        mode,
        config,
        hops: Vec::with_capacity(mode.hop_count()),
        flags: BTreeSet::new(),
    };
    let prediction = match mode {
        Mode::Vanilla => run.single_prompt(false).await?,
        Mode::Zerocot => run.single_prompt(true).await?,
        Mode::Thor => run.three_hop().await?,
    };
    Ok(run.trace(Some(prediction), None))
}

/// Runs every instance with at most `parallelism` chains in flight.
///
/// Traces come out in dataset order. A failing instance yields a
/// failed-marked trace and the batch carries on.
pub fn run_batch<'a>(
    dataset: &'a Dataset,
    backend: &'a Backend,
    mode: Mode,
    config: &'a ChainConfig,
    parallelism: usize,
) -> Result<impl Stream<Item = ChainTrace> + 'a, ChainError> {
    config.validate()?;
    if parallelism == 0 || parallelism > backend.max_in_flight() {
        return Err(ChainError::Config(format!(
            "parallelism must be in 1..={} (the backend's max_in_flight), got {parallelism}",
            backend.max_in_flight()
        )));
    }
    Ok(stream::iter(&dataset.instances)
        .map(move |instance| async move {
            match run_chain(instance, backend, mode, config).await {
                Ok(trace) => trace,
                Err(e) => {
                    tracing::warn!(instance = %instance.id, error = %e, "chain failed");
                    e.into_failed_trace(instance, mode, config)
                }
            }
        })
        .buffered(parallelism))
}
