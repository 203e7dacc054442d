#![allow(dead_code)]

use std::sync::Arc;

use aes_core::corpus::{builtin_prompt_table, PromptTable};
use aes_core::feedback::LlmConfig;
use aes_core::scoring::{write_model, ModelConfig, ModelState};
use aes_core::service::{build_state, router, LoadedModel, ServiceConfig};
use aes_core::tokenizer::build_vocabulary;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tower::ServiceExt;

pub const SAMPLE_ESSAY: &str = "Computers help people learn. They also distract students from homework! \
                                Still, most families think the benefits are larger.";

/// Small untrained model covering every built-in prompt.
pub fn small_model(table: &PromptTable) -> ModelState {
    let vocab = build_vocabulary(&[SAMPLE_ESSAY, "a story about a day at the park."], 200, 1).unwrap();
    let cfg = ModelConfig {
        max_len: 32,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        seed: 11,
        ..ModelConfig::default()
    };
    ModelState::new(cfg, vocab, table).unwrap()
}

pub fn loaded(model: ModelState) -> LoadedModel {
    let checkpoint_hash = hex::encode(Sha256::digest(write_model(&model)));
    LoadedModel { model, checkpoint_hash }
}

pub fn app(model: Option<LoadedModel>, llm: LlmConfig, service: ServiceConfig) -> axum::Router {
    let state = build_state(builtin_prompt_table(), model, llm, &service).unwrap();
    router(Arc::new(state))
}

pub fn stub_app() -> axum::Router {
    let table = builtin_prompt_table();
    app(Some(loaded(small_model(&table))), LlmConfig::default(), ServiceConfig::default())
}

pub async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

pub fn essay_body(prompt_id: u32, text: &str) -> Option<Vec<u8>> {
    Some(serde_json::to_vec(&serde_json::json!({ "prompt_id": prompt_id, "text": text })).unwrap())
}

/// One scripted reply from the mock chat-completion server.
#[derive(Clone)]
pub struct MockReply {
    pub status: u16,
    pub body: String,
    pub delay_ms: u64,
}

impl MockReply {
    pub fn chat(content: &str) -> Self {
        Self {
            status: 200,
            body: serde_json::json!({
                "choices": [{ "message": { "role": "assistant", "content": content } }]
            })
            .to_string(),
            delay_ms: 0,
        }
    }

    pub fn status(status: u16, body: &str) -> Self {
        Self {
            status,
            body: body.to_string(),
            delay_ms: 0,
        }
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay_ms = ms;
        self
    }
}

#[derive(Default)]
pub struct MockLog {
    pub requests: Vec<(Option<String>, Value)>,
    pub in_flight: usize,
    pub max_in_flight: usize,
}

/// Loopback chat-completion server replaying `script`; the last reply
/// repeats once the script is exhausted.
pub struct MockLlm {
    pub endpoint: String,
    pub log: Arc<std::sync::Mutex<MockLog>>,
}

impl MockLlm {
    pub async fn start(script: Vec<MockReply>) -> Self {
        use axum::extract::State;
        use axum::http::HeaderMap;
        use axum::response::IntoResponse;

        type Shared = (Arc<Vec<MockReply>>, Arc<std::sync::Mutex<MockLog>>);
        async fn handler(State((script, log)): State<Shared>, headers: HeaderMap, body: axum::body::Bytes) -> axum::response::Response {
            let reply = {
                let mut l = log.lock().unwrap();
                let auth = headers
                    .get("authorization")
                    .and_then(|v| v.to_str().ok())
                    .map(str::to_string);
                let json = serde_json::from_slice(&body).unwrap_or(Value::Null);
                let idx = l.requests.len().min(script.len() - 1);
                l.requests.push((auth, json));
                l.in_flight += 1;
                l.max_in_flight = l.max_in_flight.max(l.in_flight);
                script[idx].clone()
            };
            if reply.delay_ms > 0 {
                tokio::time::sleep(std::time::Duration::from_millis(reply.delay_ms)).await;
            }
            log.lock().unwrap().in_flight -= 1;
            (StatusCode::from_u16(reply.status).unwrap(), reply.body).into_response()
        }

        let log = Arc::new(std::sync::Mutex::new(MockLog::default()));
        let app = axum::Router::new()
            .route("/v1/chat/completions", axum::routing::post(handler))
            .with_state((Arc::new(script), Arc::clone(&log)));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Self {
            endpoint: format!("http://{addr}/v1/chat/completions"),
            log,
        }
    }

    pub fn hits(&self) -> usize {
        self.log.lock().unwrap().requests.len()
    }

    pub fn config(&self) -> LlmConfig {
        LlmConfig {
            endpoint: self.endpoint.clone(),
            model: "mock-model".into(),
            api_key_env: "AES_TEST_UNSET_KEY".into(),
            timeout_secs: 5.0,
            max_retries: 2,
            backoff_base_ms: 1,
            offline_stub: false,
            ..LlmConfig::default()
        }
    }
}

/// Fenced reply covering `traits` plus the summary.
pub fn fenced_reply(traits: &[&str]) -> String {
    let mut obj = serde_json::Map::new();
    for t in traits {
        obj.insert(t.to_string(), Value::String(format!("advice on {t}")));
    }
    obj.insert("overall_summary".into(), Value::String("summary".into()));
    format!("Here you go.\n```json\n{}\n```\n", Value::Object(obj))
}
