//! REST API over the scorer and the feedback client.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::PromptTable;
use crate::feedback::{build_prompt, FeedbackBundle, FeedbackError, LlmClient, LlmConfig, PromptTemplate};
use crate::scoring::{score_essay, ModelState, ScoreReport, ScoringError};

pub const DEFAULT_MAX_ESSAY_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Largest accepted essay, in UTF-8 bytes.
    pub max_essay_bytes: usize,
    pub checkpoint: Option<PathBuf>,
    /// Feedback template file; the built-in template when unset.
    pub template: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            max_essay_bytes: DEFAULT_MAX_ESSAY_BYTES,
            checkpoint: None,
            template: None,
        }
    }
}

pub struct LoadedModel {
    pub model: ModelState,
    /// SHA-256 of the checkpoint file.
    pub checkpoint_hash: String,
}

pub struct AppState {
    pub table: PromptTable,
    pub model: Option<LoadedModel>,
    pub llm: LlmClient,
    pub template: PromptTemplate,
    pub max_essay_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, detail: Value) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                detail,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<ScoringError> for ApiError {
    fn from(e: ScoringError) -> Self {
        match e {
            ScoringError::EmptyEssay => ApiError::new(StatusCode::BAD_REQUEST, "empty_essay", e.to_string(), Value::Null),
            ScoringError::UnknownPrompt(id) => ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_prompt",
                e.to_string(),
                json!({ "prompt_id": id }),
            ),
            other => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "scoring_failed",
                other.to_string(),
                Value::Null,
            ),
        }
    }
}

impl From<FeedbackError> for ApiError {
    fn from(e: FeedbackError) -> Self {
        let msg = e.to_string();
        match e {
            FeedbackError::Timeout { attempts } => ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                "llm_timeout",
                msg,
                json!({ "attempts": attempts }),
            ),
            FeedbackError::RemoteError { status, body } => ApiError::new(
                StatusCode::BAD_GATEWAY,
                "llm_remote_error",
                msg,
                json!({ "status": status, "body": body }),
            ),
            FeedbackError::MalformedReply(_) => {
                ApiError::new(StatusCode::BAD_GATEWAY, "llm_malformed_reply", msg, Value::Null)
            }
            FeedbackError::TemplateMismatch(_) | FeedbackError::InvalidConfig(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "feedback_config", msg, Value::Null)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EssayRequest {
    pub prompt_id: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub report: ScoreReport,
    pub feedback: FeedbackBundle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub model_loaded: bool,
    pub checkpoint_hash: Option<String>,
    pub prompt_table_hash: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/prompts", get(prompts))
        .route("/v1/score", post(score))
        .route("/v1/feedback", post(feedback))
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        model_loaded: state.model.is_some(),
        checkpoint_hash: state.model.as_ref().map(|m| m.checkpoint_hash.clone()),
        prompt_table_hash: state.table.content_hash(),
    })
}

async fn prompts(State(state): State<Arc<AppState>>) -> Json<PromptTable> {
    Json(state.table.clone())
}

/// JSON escaping can at most sextuple a byte (`\u00XX`); this bounds the raw
/// body read before the essay itself is measured.
fn body_limit(max_essay_bytes: usize) -> usize {
    max_essay_bytes.saturating_mul(6).saturating_add(4096)
}

async fn parse_request(state: &AppState, body: Body) -> Result<EssayRequest, ApiError> {
    let too_large = |detail| {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("essay exceeds {} bytes", state.max_essay_bytes),
            detail,
        )
    };
    let bytes: Bytes = to_bytes(body, body_limit(state.max_essay_bytes))
        .await
        .map_err(|_| too_large(json!({ "limit_bytes": state.max_essay_bytes })))?;
    let req: EssayRequest = serde_json::from_slice(&bytes).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            "request body must be {\"prompt_id\": integer, \"text\": string}",
            json!({ "error": e.to_string() }),
        )
    })?;
    if req.text.len() > state.max_essay_bytes {
        return Err(too_large(
            json!({ "limit_bytes": state.max_essay_bytes, "essay_bytes": req.text.len() }),
        ));
    }
    if req.text.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "empty_essay",
            "essay text is empty",
            Value::Null,
        ));
    }
    Ok(req)
}

async fn score_request(state: &Arc<AppState>, req: &EssayRequest) -> Result<ScoreReport, ApiError> {
    if state.model.is_none() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model_not_loaded",
            "no model checkpoint is loaded",
            Value::Null,
        ));
    }
    if state.table.get(req.prompt_id).is_none() {
        return Err(ScoringError::UnknownPrompt(req.prompt_id).into());
    }
    let state = Arc::clone(state);
    let (prompt_id, text) = (req.prompt_id, req.text.clone());
    tokio::task::spawn_blocking(move || {
        let spec = state.table.get(prompt_id).expect("checked above");
        let model = &state.model.as_ref().expect("checked above").model;
        score_essay(&text, spec, model)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), Value::Null))?
    .map_err(ApiError::from)
}

async fn score(State(state): State<Arc<AppState>>, body: Body) -> Result<Json<ScoreReport>, ApiError> {
    let req = parse_request(&state, body).await?;
    Ok(Json(score_request(&state, &req).await?))
}

async fn feedback(State(state): State<Arc<AppState>>, body: Body) -> Result<Json<FeedbackResponse>, ApiError> {
    let req = parse_request(&state, body).await?;
    let report = score_request(&state, &req).await?;
    let spec = state.table.get(req.prompt_id).expect("scored prompt exists");
    let prompt = build_prompt(&report, &req.text, spec, &state.template)?;
    let feedback = state.llm.request_feedback(&prompt, &report).await?;
    Ok(Json(FeedbackResponse { report, feedback }))
}

pub fn build_state(
    table: PromptTable,
    model: Option<LoadedModel>,
    llm: LlmConfig,
    service: &ServiceConfig,
) -> Result<AppState, FeedbackError> {
    let template = match &service.template {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::builtin(),
    };
    Ok(AppState {
        table,
        model,
        llm: LlmClient::new(llm)?,
        template,
        max_essay_bytes: service.max_essay_bytes,
    })
}

/// Binds and serves until Ctrl-C.
pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let addr: SocketAddr = bind
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bind address {bind}: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
