//! Self-consistency voting over the sampled candidates of one hop.
//!
//! Candidates are partitioned by a caller-supplied key (normalized answer text
//! for the aspect and opinion hops, the extracted label for the polarity hop).
//! Clusters are ranked by size, then score mass, then first appearance; the
//! unparseable cluster always ranks last. The winner's best-scoring member is
//! carried forward as the hop's answer.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Candidate;

/// Cluster key for answers with no usable key.
pub const UNPARSEABLE_KEY: &str = "⊥";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VoteError {
    #[error("no candidates to vote over")]
    EmptyInput,
    #[error("every candidate is unparseable")]
    AllUnparseable,
    #[error("invalid voting config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VotingConfig {
    /// Samples drawn per hop.
    pub k: u32,
    /// Smallest winning cluster that counts as a consistent vote.
    pub min_cluster: u32,
}

impl VotingConfig {
    pub const DEFAULT_K: u32 = 5;

    /// `min_cluster` defaults to a strict-or-tied majority, `ceil(k / 2)`.
    pub fn with_k(k: u32) -> Result<Self, VoteError> {
        Self::new(k, k.div_ceil(2))
    }

    pub fn new(k: u32, min_cluster: u32) -> Result<Self, VoteError> {
        let config = VotingConfig { k, min_cluster };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), VoteError> {
        if self.k == 0 {
            return Err(VoteError::InvalidConfig("k must be at least 1".into()));
        }
        if self.min_cluster == 0 || self.min_cluster > self.k {
            return Err(VoteError::InvalidConfig(format!(
                "min_cluster must be in 1..={}, got {}",
                self.k, self.min_cluster
            )));
        }
        Ok(())
    }
}

impl Default for VotingConfig {
    fn default() -> Self {
        VotingConfig {
            k: Self::DEFAULT_K,
            min_cluster: Self::DEFAULT_K.div_ceil(2),
        }
    }
}

/// A candidate together with its position in the backend response.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub index: usize,
    pub candidate: Candidate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCluster {
    pub key: String,
    /// In original candidate order; never empty.
    pub members: Vec<Member>,
    pub mass: f64,
}

impl CandidateCluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn first_seen(&self) -> usize {
        self.members[0].index
    }

    pub fn is_unparseable(&self) -> bool {
        self.key == UNPARSEABLE_KEY
    }

    /// Highest score, lowest index on ties.
    pub fn best(&self) -> &Member {
        self.members
            .iter()
            .reduce(|best, m| {
                if m.candidate.score.total_cmp(&best.candidate.score) == Ordering::Greater {
                    m
                } else {
                    best
                }
            })
            .expect("cluster members are never empty")
    }
}

fn rank(a: &CandidateCluster, b: &CandidateCluster) -> Ordering {
    a.is_unparseable()
        .cmp(&b.is_unparseable())
        .then_with(|| b.size().cmp(&a.size()))
        .then_with(|| b.mass.total_cmp(&a.mass))
        .then_with(|| a.first_seen().cmp(&b.first_seen()))
}

/// Partitions candidates by `key_of` and ranks the clusters.
///
/// `key_of` is total; return [`UNPARSEABLE_KEY`] for answers without a key.
pub fn cluster_candidates<F>(
    candidates: &[Candidate],
    key_of: F,
) -> Result<Vec<CandidateCluster>, VoteError>
where
    F: Fn(&Candidate) -> String,
{
    if candidates.is_empty() {
        return Err(VoteError::EmptyInput);
    }
    let mut clusters: Vec<CandidateCluster> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (index, candidate) in candidates.iter().enumerate() {
        let key = key_of(candidate);
        let at = *slot.entry(key.clone()).or_insert_with(|| {
            clusters.push(CandidateCluster {
                key,
                members: Vec::new(),
                mass: 0.0,
            });
            clusters.len() - 1
        });
        let cluster = &mut clusters[at];
        cluster.mass += candidate.score;
        cluster.members.push(Member {
            index,
            candidate: candidate.clone(),
        });
    }
    clusters.sort_by(rank);
    Ok(clusters)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub candidate: Candidate,
    pub key: String,
    /// The winning cluster reached `min_cluster` and is parseable.
    pub consistent: bool,
}

/// Picks the best member of the top-ranked cluster.
///
/// Fails with [`VoteError::AllUnparseable`] when only the unparseable cluster
/// exists; the caller decides the fallback.
pub fn select_answer(
    clusters: &[CandidateCluster],
    config: &VotingConfig,
) -> Result<Selection, VoteError> {
    let top = clusters.first().ok_or(VoteError::EmptyInput)?;
    if top.is_unparseable() {
        return Err(VoteError::AllUnparseable);
    }
    let best = top.best();
    Ok(Selection {
        index: best.index,
        candidate: best.candidate.clone(),
        key: top.key.clone(),
        consistent: top.size() >= config.min_cluster as usize,
    })
}
