//! The HTTP generator against a local fake OpenAI-compatible server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use thor_core::backend::{BackendConfig, BackendError, HttpGenerator};
use thor_core::prompt::build_vanilla_prompt;
use thor_core::{Backend, GenerationRequest, RequestKey};

/// Replies with the queued status codes first, then with `n` choices.
#[derive(Clone, Default)]
struct Fake {
    failures: Arc<Mutex<Vec<StatusCode>>>,
    calls: Arc<AtomicUsize>,
    call_times: Arc<Mutex<Vec<Instant>>>,
    bodies: Arc<Mutex<Vec<Value>>>,
    auth: Arc<Mutex<Vec<String>>>,
    raw_reply: Arc<Mutex<Option<String>>>,
    delay_ms: u64,
    active: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

async fn completions(
    State(fake): State<Fake>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> Response {
    fake.calls.fetch_add(1, Ordering::SeqCst);
    let now = fake.active.fetch_add(1, Ordering::SeqCst) + 1;
    fake.peak.fetch_max(now, Ordering::SeqCst);
    if fake.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(fake.delay_ms)).await;
    }
    fake.active.fetch_sub(1, Ordering::SeqCst);
    fake.call_times.lock().unwrap().push(Instant::now());
    fake.auth.lock().unwrap().push(
        headers
            .get("authorization")
            .map(|v| v.to_str().unwrap().to_string())
            .unwrap_or_default(),
    );
    fake.bodies.lock().unwrap().push(body.clone());
    if let Some(status) = fake.failures.lock().unwrap().pop() {
        return (status, "try later").into_response();
    }
    if let Some(raw) = fake.raw_reply.lock().unwrap().clone() {
        return raw.into_response();
    }
    let n = body["n"].as_u64().unwrap_or(1);
    let chat = body.get("messages").is_some();
    let choices: Vec<Value> = (0..n)
        .map(|i| {
            let text = format!(" answer {i} is positive ");
            let lp = -0.5 * (i as f64 + 1.0);
            if chat {
                json!({"index": i, "message": {"role": "assistant", "content": text},
                       "logprobs": {"content": [{"token": "a", "logprob": lp}, {"token": "b", "logprob": lp}]}})
            } else {
                json!({"index": i, "text": text, "logprobs": {"token_logprobs": [lp, lp * 3.0]}})
            }
        })
        .collect();
    Json(json!({ "choices": choices })).into_response()
}

async fn serve(fake: Fake) -> String {
    let app = Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/chat/completions", post(completions))
        .with_state(fake);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn config(base: &str, path: &str) -> BackendConfig {
    let mut cfg = BackendConfig::http(format!("{base}{path}"), "tiny-model");
    cfg.backoff_initial_ms = 20;
    cfg.timeout_secs = 5;
    cfg
}

fn request(n: u32) -> GenerationRequest {
    GenerationRequest {
        prompt: build_vanilla_prompt("The fan sounds like a jet engine.", "fan").unwrap(),
        n,
        temperature: 0.9,
        max_tokens: 64,
        seed: Some(11),
    }
}

fn backend(cfg: &BackendConfig) -> Backend {
    Backend::new(
        Arc::new(HttpGenerator::with_api_key(cfg, "sk-test").unwrap()),
        cfg.max_in_flight,
    )
}

#[tokio::test]
async fn completion_framing_round_trip() {
    let fake = Fake::default();
    let base = serve(fake.clone()).await;
    let out = backend(&config(&base, "/v1/completions"))
        .generate(&RequestKey::new("r1", 1), &request(3))
        .await
        .unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[0].text, "answer 0 is positive");
    assert_eq!(out[2].text, "answer 2 is positive");
    // mean of (lp, 3 lp) = 2 lp
    assert_eq!(out[1].score, -2.0);

    let body = &fake.bodies.lock().unwrap()[0];
    assert_eq!(body["model"], "tiny-model");
    assert_eq!(body["n"], 3);
    assert_eq!(body["temperature"], 0.9);
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["logprobs"], 1);
    assert_eq!(body["seed"], 11);
    assert!(body["prompt"].as_str().unwrap().contains("jet engine"));
    assert_eq!(fake.auth.lock().unwrap()[0], "Bearer sk-test");
}

#[tokio::test]
async fn chat_framing_round_trip() {
    let fake = Fake::default();
    let base = serve(fake.clone()).await;
    let out = backend(&config(&base, "/v1/chat/completions"))
        .generate(&RequestKey::new("r1", 2), &request(2))
        .await
        .unwrap();
    assert_eq!(out[0].score, -0.5);
    assert_eq!(out[1].score, -1.0);
    let body = &fake.bodies.lock().unwrap()[0];
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["logprobs"], true);
}

#[tokio::test]
async fn rate_limits_are_retried_with_growing_backoff() {
    let fake = Fake::default();
    *fake.failures.lock().unwrap() = vec![
        StatusCode::TOO_MANY_REQUESTS,
        StatusCode::SERVICE_UNAVAILABLE,
    ];
    let base = serve(fake.clone()).await;
    let out = backend(&config(&base, "/v1/completions"))
        .generate(&RequestKey::new("r1", 1), &request(1))
        .await
        .unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(fake.calls.load(Ordering::SeqCst), 3);
    let times = fake.call_times.lock().unwrap();
    let gaps: Vec<Duration> = times.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(gaps[0] >= Duration::from_millis(20));
    assert!(gaps[1] >= Duration::from_millis(40));
}

#[tokio::test]
async fn retries_are_bounded() {
    let fake = Fake::default();
    *fake.failures.lock().unwrap() = vec![StatusCode::TOO_MANY_REQUESTS; 10];
    let base = serve(fake.clone()).await;
    let mut cfg = config(&base, "/v1/completions");
    cfg.max_retries = 2;
    let err = backend(&cfg)
        .generate(&RequestKey::new("r1", 1), &request(1))
        .await
        .unwrap_err();
    assert!(
        matches!(err, BackendError::RateLimited { attempts: 3 }),
        "{err:?}"
    );
    assert_eq!(fake.calls.load(Ordering::SeqCst), 3);

    let fake = Fake::default();
    *fake.failures.lock().unwrap() = vec![StatusCode::BAD_GATEWAY; 10];
    let base = serve(fake.clone()).await;
    let mut cfg = config(&base, "/v1/completions");
    cfg.max_retries = 0;
    let err = backend(&cfg)
        .generate(&RequestKey::new("r1", 1), &request(1))
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)));
    assert_eq!(fake.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let fake = Fake::default();
    *fake.failures.lock().unwrap() = vec![StatusCode::UNAUTHORIZED];
    let base = serve(fake.clone()).await;
    let err = backend(&config(&base, "/v1/completions"))
        .generate(&RequestKey::new("r1", 1), &request(1))
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::Rejected { status: 401, .. }));
    assert_eq!(fake.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn unparsable_payload_is_malformed() {
    let fake = Fake::default();
    *fake.raw_reply.lock().unwrap() = Some("{\"choices\": 12}".into());
    let base = serve(fake.clone()).await;
    let err = backend(&config(&base, "/v1/completions"))
        .generate(&RequestKey::new("r1", 1), &request(1))
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse(_)));
}

#[tokio::test]
async fn unreachable_endpoint_is_transport_error() {
    // bind then drop to get a port nobody listens on
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut cfg = config(&format!("http://127.0.0.1:{port}"), "/v1/completions");
    cfg.max_retries = 1;
    let err = backend(&cfg)
        .generate(&RequestKey::new("r1", 1), &request(1))
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)));
}

#[tokio::test]
async fn from_config_requires_key() {
    let mut cfg = BackendConfig::http("http://127.0.0.1:9/v1/completions", "m");
    cfg.api_key_env = "THOR_HTTP_TEST_UNSET_KEY_91c2".into();
    assert!(matches!(
        Backend::from_config(&cfg),
        Err(BackendError::AuthMissing(_))
    ));
}

#[tokio::test]
async fn in_flight_bound_is_enforced() {
    let fake = Fake {
        delay_ms: 30,
        ..Fake::default()
    };
    let base = serve(fake.clone()).await;
    let mut cfg = config(&base, "/v1/completions");
    cfg.max_in_flight = 3;
    let backend = backend(&cfg);
    let calls = (0..12).map(|i| {
        let backend = backend.clone();
        async move {
            backend
                .generate(&RequestKey::new(format!("r{i}"), 1), &request(1))
                .await
                .unwrap()
        }
    });
    futures::future::join_all(calls).await;
    assert_eq!(fake.calls.load(Ordering::SeqCst), 12);
    assert_eq!(fake.peak.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn rate_limit_paces_requests() {
    let fake = Fake::default();
    let base = serve(fake.clone()).await;
    let cfg = config(&base, "/v1/completions");
    let backend = backend(&cfg).with_rate_limit(40.0);
    let start = Instant::now();
    let calls = (0..50).map(|i| {
        let backend = backend.clone();
        async move {
            backend
                .generate(&RequestKey::new(format!("r{i}"), 1), &request(1))
                .await
                .unwrap()
        }
    });
    futures::future::join_all(calls).await;
    assert_eq!(fake.calls.load(Ordering::SeqCst), 50);
    // 40 burst tokens, then 10 more at 40/s
    assert!(start.elapsed() >= Duration::from_millis(200));
}
