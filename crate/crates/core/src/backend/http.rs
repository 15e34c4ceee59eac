//! Client for OpenAI-compatible completion and chat-completion endpoints.

use std::time::Duration;

use async_trait::async_trait;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendConfig, BackendError, GenerationRequest, Generator, RawCompletion, RequestKey};

/// Request body shape: a bare `prompt` or a single user message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framing {
    Completion,
    Chat,
}

impl Framing {
    pub fn infer(endpoint_url: &str) -> Framing {
        let path = endpoint_url
            .split(['?', '#'])
            .next()
            .unwrap_or_default()
            .trim_end_matches('/');
        if path.ends_with("/chat/completions") {
            Framing::Chat
        } else {
            Framing::Completion
        }
    }
}

/// Delay before retry number `attempt` (0-based): `initial * 2^attempt`.
pub fn backoff_delay(initial: Duration, attempt: u32) -> Duration {
    initial.saturating_mul(1u32.checked_shl(attempt).unwrap_or(u32::MAX))
}

#[derive(Debug)]
pub struct HttpGenerator {
    client: reqwest::Client,
    endpoint_url: String,
    model: String,
    framing: Framing,
    api_key: String,
    max_retries: u32,
    backoff_initial: Duration,
    logprobs: bool,
}

impl HttpGenerator {
    /// Reads the bearer token from the variable named by `api_key_env`.
    pub fn from_env(config: &BackendConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| BackendError::AuthMissing(config.api_key_env.clone()))?;
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(
        config: &BackendConfig,
        api_key: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let endpoint_url = config
            .endpoint_url
            .clone()
            .ok_or_else(|| BackendError::Config("http backend needs endpoint_url".into()))?;
        let model = config
            .model_name
            .clone()
            .ok_or_else(|| BackendError::Config("http backend needs model_name".into()))?;
        let client = reqwest::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| BackendError::Config(format!("building HTTP client: {e}")))?;
        Ok(HttpGenerator {
            client,
            framing: config
                .framing
                .unwrap_or_else(|| Framing::infer(&endpoint_url)),
            endpoint_url,
            model,
            api_key: api_key.into(),
            max_retries: config.max_retries,
            backoff_initial: Duration::from_millis(config.backoff_initial_ms),
            logprobs: config.logprobs,
        })
    }

    fn body(&self, request: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "n": request.n,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let prompt = request.prompt.as_str();
        match self.framing {
            Framing::Completion => {
                body["prompt"] = json!(prompt);
                if self.logprobs {
                    body["logprobs"] = json!(1);
                }
            }
            Framing::Chat => {
                body["messages"] = json!([{ "role": "user", "content": prompt }]);
                if self.logprobs {
                    body["logprobs"] = json!(true);
                }
            }
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    async fn attempt(&self, body: &Value) -> Result<Vec<RawCompletion>, Failure> {
        let response = self
            .client
            .post(&self.endpoint_url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .await
            .map_err(|e| Failure::Retry(BackendError::Transport(e.to_string())))?;

        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Err(Failure::Retry(BackendError::RateLimited { attempts: 0 }));
        }
        if status.is_server_error() || status == StatusCode::REQUEST_TIMEOUT {
            return Err(Failure::Retry(BackendError::Transport(format!(
                "server returned {status}"
            ))));
        }
        let bytes = response
            .bytes()
            .await
            .map_err(|e| Failure::Retry(BackendError::Transport(e.to_string())))?;
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::Rejected {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).chars().take(500).collect(),
            }));
        }
        parse_response(&bytes, self.framing).map_err(Failure::Fatal)
    }
}

enum Failure {
    Retry(BackendError),
    Fatal(BackendError),
}

#[async_trait]
impl Generator for HttpGenerator {
    async fn sample(
        &self,
        key: &RequestKey,
        request: &GenerationRequest,
    ) -> Result<Vec<RawCompletion>, BackendError> {
        let body = self.body(request);
        let mut attempt = 0;
        loop {
            match self.attempt(&body).await {
                Ok(out) => return Ok(out),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(e)) if attempt >= self.max_retries => {
                    return Err(match e {
                        BackendError::RateLimited { .. } => BackendError::RateLimited {
                            attempts: attempt + 1,
                        },
                        other => other,
                    })
                }
                Err(Failure::Retry(e)) => {
                    let delay = backoff_delay(self.backoff_initial, attempt);
                    tracing::warn!(
                        instance = %key.instance_id,
                        step = key.step,
                        attempt = attempt + 1,
                        delay_ms = delay.as_millis() as u64,
                        error = %e,
                        "retrying generation request"
                    );
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
            }
        }
    }

    fn describe(&self) -> String {
        format!("http {} ({})", self.endpoint_url, self.model)
    }
}

#[derive(Debug, Deserialize)]
struct ApiResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    message: Option<Message>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

/// Completion endpoints report `token_logprobs`; chat endpoints report
/// `content: [{token, logprob}]`.
#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    token_logprobs: Option<Vec<Option<f64>>>,
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn parse_response(bytes: &[u8], framing: Framing) -> Result<Vec<RawCompletion>, BackendError> {
    let response: ApiResponse = serde_json::from_slice(bytes)
        .map_err(|e| BackendError::MalformedResponse(format!("decoding response: {e}")))?;
    response
        .choices
        .into_iter()
        .enumerate()
        .map(|(i, choice)| {
            let text = match framing {
                Framing::Completion => choice.text,
                Framing::Chat => choice.message.and_then(|m| m.content),
            }
            .ok_or_else(|| BackendError::MalformedResponse(format!("choice {i} has no text")))?;
            let score = choice.logprobs.and_then(|lp| {
                if let Some(tokens) = lp.content {
                    mean(tokens.into_iter().map(|t| t.logprob))
                } else {
                    mean(lp.token_logprobs?.into_iter().flatten())
                }
            });
            Ok(RawCompletion { text, score })
        })
        .collect()
}
