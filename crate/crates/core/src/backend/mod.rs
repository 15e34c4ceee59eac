//! Text-generation backends.
//!
//! [`Backend`] is the shared handle the chain talks to. It validates requests,
//! bounds the number of in-flight calls, applies the optional request-rate
//! limit, trims generations and re-asks once for whitespace-only replies.
//! The raw sampling is delegated to a [`Generator`]: [`HttpGenerator`] for
//! OpenAI-compatible endpoints or [`MockGenerator`] for scripted replies.

mod http;
mod limiter;
mod mock;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::prompt::PromptText;

pub use http::{backoff_delay, Framing, HttpGenerator};
pub use limiter::TokenBucket;
pub use mock::{MockGenerator, ScriptEntry};

pub const DEFAULT_API_KEY_ENV: &str = "THOR_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("API key environment variable `{0}` is not set")]
    AuthMissing(String),
    #[error("bad mock fixture at line {line}: {reason}")]
    BadFixture { line: usize, reason: String },
    #[error("mock script exhausted for instance `{id}` step {step}")]
    ScriptExhausted { id: String, step: u8 },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One sampled generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Mean per-token log-probability, or 0 when the backend reports none.
    pub score: f64,
}

/// A generation as returned by a [`Generator`], before trimming.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCompletion {
    pub text: String,
    pub score: Option<f64>,
}

/// Which instance and hop a request belongs to. The mock keys its script on
/// this; HTTP backends only log it. Single-prompt modes use step 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RequestKey {
    pub instance_id: String,
    pub step: u8,
}

impl RequestKey {
    pub fn new(instance_id: impl Into<String>, step: u8) -> Self {
        RequestKey {
            instance_id: instance_id.into(),
            step,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: PromptText,
    pub n: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.n == 0 {
            return Err(BackendError::InvalidRequest("n must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.temperature == 0.0 && self.n > 1 {
            return Err(BackendError::InvalidRequest(
                "greedy decoding (temperature 0) only yields one distinct sample; use n = 1".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        if self.prompt.as_str().trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        Ok(())
    }
}

/// Raw sampling from some model.
#[async_trait]
pub trait Generator: Send + Sync {
    /// Returns the generations in the order the model reported them.
    async fn sample(
        &self,
        key: &RequestKey,
        request: &GenerationRequest,
    ) -> Result<Vec<RawCompletion>, BackendError>;

    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_in_flight() -> usize {
    8
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_logprobs() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    /// Completion or chat framing; inferred from the endpoint path when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub framing: Option<Framing>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First retry delay; each further retry doubles it.
    #[serde(default = "default_backoff_ms")]
    pub backoff_initial_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
    /// Ask the endpoint for token log-probabilities.
    #[serde(default = "default_logprobs")]
    pub logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
}

impl BackendConfig {
    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint_url: Some(endpoint_url.into()),
            model_name: Some(model_name.into()),
            ..Self::mock_defaults()
        }
    }

    pub fn mock(script: impl Into<PathBuf>) -> Self {
        BackendConfig {
            mock_script: Some(script.into()),
            ..Self::mock_defaults()
        }
    }

    fn mock_defaults() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: None,
            framing: None,
            api_key_env: default_api_key_env(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_initial_ms: default_backoff_ms(),
            max_in_flight: default_max_in_flight(),
            requests_per_second: None,
            logprobs: default_logprobs(),
            mock_script: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::Http => {
                if self.endpoint_url.as_deref().is_none_or(str::is_empty) {
                    return Err(BackendError::Config(
                        "http backend needs endpoint_url".into(),
                    ));
                }
                if self.model_name.as_deref().is_none_or(str::is_empty) {
                    return Err(BackendError::Config("http backend needs model_name".into()));
                }
            }
            BackendKind::Mock => {
                if self.mock_script.is_none() {
                    return Err(BackendError::Config(
                        "mock backend needs mock_script".into(),
                    ));
                }
            }
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if let Some(rps) = self.requests_per_second {
            if !(rps.is_finite() && rps > 0.0) {
                return Err(BackendError::Config(format!(
                    "requests_per_second must be positive, got {rps}"
                )));
            }
        }
        Ok(())
    }
}

/// Shareable handle over a [`Generator`].
#[derive(Clone)]
pub struct Backend {
    generator: Arc<dyn Generator>,
    in_flight: Arc<Semaphore>,
    max_in_flight: usize,
    limiter: Option<Arc<TokenBucket>>,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("generator", &self.generator.describe())
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl Backend {
    pub fn new(generator: Arc<dyn Generator>, max_in_flight: usize) -> Self {
        let max_in_flight = max_in_flight.max(1);
        Backend {
            generator,
            in_flight: Arc::new(Semaphore::new(max_in_flight)),
            max_in_flight,
            limiter: None,
        }
    }

    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        self.limiter = Some(Arc::new(TokenBucket::new(requests_per_second)));
        self
    }

    /// Builds the generator named by the config. HTTP backends read their API
    /// key from the environment here.
    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let generator: Arc<dyn Generator> = match config.kind {
            BackendKind::Http => Arc::new(HttpGenerator::from_env(config)?),
            BackendKind::Mock => {
                let path = config.mock_script.as_ref().expect("validated above");
                Arc::new(MockGenerator::load(path)?)
            }
        };
        let backend = Backend::new(generator, config.max_in_flight);
        Ok(match config.requests_per_second {
            Some(rps) => backend.with_rate_limit(rps),
            None => backend,
        })
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn describe(&self) -> String {
        self.generator.describe()
    }

    /// Samples `request.n` candidates, trimmed, in backend order.
    ///
    /// Whitespace-only generations are re-requested once; if the retry still
    /// yields blanks the response is malformed.
    pub async fn generate(
        &self,
        key: &RequestKey,
        request: &GenerationRequest,
    ) -> Result<Vec<Candidate>, BackendError> {
        request.validate()?;
        let mut slots = self.sample_checked(key, request).await?;

        let blanks: Vec<usize> = slots
            .iter()
            .enumerate()
            .filter(|(_, c)| c.text.is_empty())
            .map(|(i, _)| i)
            .collect();
        if !blanks.is_empty() {
            tracing::debug!(
                instance = %key.instance_id,
                step = key.step,
                blanks = blanks.len(),
                "re-asking for whitespace-only generations"
            );
            let retry = GenerationRequest {
                n: blanks.len() as u32,
                ..request.clone()
            };
            let refill = self.sample_checked(key, &retry).await?;
            for (slot, fresh) in blanks.into_iter().zip(refill) {
                if fresh.text.is_empty() {
                    return Err(BackendError::MalformedResponse(
                        "whitespace-only generation after one re-ask".into(),
                    ));
                }
                slots[slot] = fresh;
            }
        }
        Ok(slots)
    }

    async fn sample_checked(
        &self,
        key: &RequestKey,
        request: &GenerationRequest,
    ) -> Result<Vec<Candidate>, BackendError> {
        let _permit = self
            .in_flight
            .acquire()
            .await
            .expect("in-flight semaphore is never closed");
        if let Some(limiter) = &self.limiter {
            limiter.acquire().await;
        }
        let raw = self.generator.sample(key, request).await?;
        if raw.len() != request.n as usize {
            return Err(BackendError::MalformedResponse(format!(
                "asked for {} generations, got {}",
                request.n,
                raw.len()
            )));
        }
        raw.into_iter()
            .map(|r| {
                let score = r.score.unwrap_or(0.0);
                if !score.is_finite() {
                    return Err(BackendError::MalformedResponse(format!(
                        "non-finite score {score}"
                    )));
                }
                Ok(Candidate {
                    text: r.text.trim().to_string(),
                    score,
                })
            })
            .collect()
    }
}
