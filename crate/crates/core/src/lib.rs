//! Three-hop chain-of-thought reasoning for implicit sentiment analysis.
//!
//! The engine asks a text-generation backend for the aspect a sentence talks
//! about, then the implicit opinion on it, then the polarity, voting over
//! several samples at each hop. Vanilla and zero-shot CoT prompting are
//! available as baselines, along with dataset loading, macro-F1 evaluation
//! and export of supervised revising examples.

pub mod backend;
pub mod chain;
pub mod consistency;
pub mod dataset;
pub mod eval;
pub mod export;
pub mod extraction;
pub mod prompt;
pub mod trace_io;

pub use backend::{Backend, BackendConfig, BackendError, Candidate, GenerationRequest, RequestKey};
pub use chain::{run_batch, run_chain, ChainConfig, ChainTrace, DecodingParams, Mode};
pub use consistency::VotingConfig;
pub use dataset::{load_dataset, Dataset, Instance};
pub use eval::{evaluate, EvalReport};
pub use extraction::Polarity;
