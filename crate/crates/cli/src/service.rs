//! HTTP service under `/v1`.
//!
//! Requests clone the current snapshot `Arc` once and use only that value, so
//! a reload never produces a response that mixes two registry versions.
//! Inference runs on the blocking pool; slow plug-and-play requests do not
//! hold up others.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sentiscale_core::corpus::tokenize;
use sentiscale_core::metrics::MetricScores;
use sentiscale_core::persona::validate_score;
use sentiscale_core::CoreError;
use tower_http::cors::CorsLayer;

use crate::error::{exit_code, CliError};
use crate::registry::{Kind, Snapshot};

pub struct AppState {
    root: PathBuf,
    current: RwLock<Arc<Snapshot>>,
    versions: AtomicU64,
}

impl AppState {
    /// Loads the registry at `root`; any unloadable checkpoint fails here.
    pub fn load(root: impl Into<PathBuf>) -> crate::error::Result<Arc<Self>> {
        let root = root.into();
        let snap = Snapshot::load(&root, 1)?;
        Ok(Arc::new(AppState { root, current: RwLock::new(Arc::new(snap)), versions: AtomicU64::new(1) }))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock poisoned").clone()
    }

    /// Loads the registry again and swaps it in. In-flight requests finish on
    /// the snapshot they started with.
    pub fn reload(&self) -> crate::error::Result<u64> {
        let version = self.versions.fetch_add(1, Ordering::SeqCst) + 1;
        let snap = Snapshot::load(&self.root, version)?;
        *self.current.write().expect("snapshot lock poisoned") = Arc::new(snap);
        Ok(version)
    }
}

#[derive(Debug, Serialize)]
struct ApiError {
    error: String,
    kind: &'static str,
}

pub struct HttpError(StatusCode, ApiError);

impl HttpError {
    pub fn status(&self) -> StatusCode {
        self.0
    }

    pub fn message(&self) -> &str {
        &self.1.error
    }

    fn not_found(msg: String) -> Self {
        HttpError(StatusCode::NOT_FOUND, ApiError { error: msg, kind: "UnknownModel" })
    }
}

impl From<CliError> for HttpError {
    fn from(e: CliError) -> Self {
        let (status, kind) = match &e {
            CliError::Core(CoreError::InvalidScore(_)) => (StatusCode::BAD_REQUEST, "InvalidScore"),
            CliError::Core(CoreError::EmptySentence) => (StatusCode::BAD_REQUEST, "EmptySentence"),
            CliError::Core(CoreError::Encoding(_)) => (StatusCode::BAD_REQUEST, "Encoding"),
            CliError::Core(CoreError::InvalidArgument(_)) => (StatusCode::BAD_REQUEST, "InvalidArgument"),
            CliError::Core(CoreError::MissingDependency(_)) => (StatusCode::SERVICE_UNAVAILABLE, "MissingDependency"),
            _ if exit_code(&e) == 6 => (StatusCode::INTERNAL_SERVER_ERROR, "Diverged"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        };
        HttpError(status, ApiError { error: e.to_string(), kind })
    }
}

impl From<CoreError> for HttpError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e).into()
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type HttpResult<T> = std::result::Result<Json<T>, HttpError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub message: String,
    pub model_id: String,
    #[serde(default = "neutral")]
    pub sentiment: f64,
}

fn neutral() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub reply: String,
    pub scores: Option<MetricScores>,
    pub latency_ms: f64,
    pub model_id: String,
    /// Parameter id of the checkpoint that produced the reply.
    pub checkpoint: String,
    /// Registry snapshot the request ran against.
    pub version: u64,
    pub notice: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub x: String,
    pub y: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub coh1: f64,
    pub coh2: f64,
    pub scl: f64,
    pub lm: f64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub kind: Kind,
    pub checkpoint: String,
    pub uses_sentiment: bool,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub version: u64,
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: u64,
    pub models: usize,
    pub metrics: bool,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> std::result::Result<T, HttpError> + Send + 'static) -> std::result::Result<T, HttpError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| HttpError(StatusCode::INTERNAL_SERVER_ERROR, ApiError { error: e.to_string(), kind: "Internal" }))?
}

/// Synchronous chat turn against one snapshot.
pub fn chat_turn(snap: &Snapshot, req: &ChatRequest) -> std::result::Result<ChatResponse, HttpError> {
    let start = Instant::now();
    validate_score(req.sentiment)?;
    let model = snap.models.get(&req.model_id).ok_or_else(|| HttpError::not_found(format!("unknown model id {:?}", req.model_id)))?;
    let mode = model.vocab().segmentation();
    let x = tokenize(&req.message, mode)?;
    if x.is_empty() {
        return Err(CoreError::EmptySentence.into());
    }
    let reply = model.respond(&x, req.sentiment)?;
    let scores = snap.metrics.as_ref().and_then(|b| b.score(&x, &reply.tokens).ok());
    Ok(ChatResponse {
        reply: sentiscale_core::corpus::detokenize(&reply.tokens, mode),
        scores,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        model_id: model.id.clone(),
        checkpoint: model.checkpoint.clone(),
        version: snap.version,
        notice: reply.notice,
    })
}

pub fn score(snap: &Snapshot, req: &ScoreRequest) -> std::result::Result<ScoreResponse, HttpError> {
    let bundle = snap.metrics.as_ref().ok_or_else(|| HttpError::from(CoreError::MissingDependency("no metric bundle registered".into())))?;
    let mode = bundle.coherence.vocab.segmentation();
    let x = tokenize(&req.x, mode)?;
    let y = tokenize(&req.y, mode)?;
    let s = bundle.score(&x, &y)?;
    Ok(ScoreResponse { coh1: s.coh1, coh2: s.coh2, scl: s.scl, lm: s.lm, version: snap.version })
}

async fn chat(State(st): State<Arc<AppState>>, Json(req): Json<ChatRequest>) -> HttpResult<ChatResponse> {
    let snap = st.snapshot();
    blocking(move || chat_turn(&snap, &req)).await.map(Json)
}

async fn score_handler(State(st): State<Arc<AppState>>, Json(req): Json<ScoreRequest>) -> HttpResult<ScoreResponse> {
    let snap = st.snapshot();
    blocking(move || score(&snap, &req)).await.map(Json)
}

async fn models(State(st): State<Arc<AppState>>) -> Json<ModelsResponse> {
    let snap = st.snapshot();
    let models = snap
        .models
        .values()
        .map(|m| ModelInfo { id: m.id.clone(), kind: m.entry.kind, checkpoint: m.checkpoint.clone(), uses_sentiment: m.uses_sentiment(), metadata: m.entry.metadata.clone() })
        .collect();
    Json(ModelsResponse { version: snap.version, models })
}

async fn health(State(st): State<Arc<AppState>>) -> Json<HealthResponse> {
    let snap = st.snapshot();
    Json(HealthResponse { status: "ok".into(), version: snap.version, models: snap.models.len(), metrics: snap.metrics.is_some() })
}

async fn reload(State(st): State<Arc<AppState>>) -> HttpResult<serde_json::Value> {
    let version = blocking(move || st.reload().map_err(HttpError::from)).await?;
    Ok(Json(serde_json::json!({ "version": version })))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/score", post(score_handler))
        .route("/v1/models", get(models))
        .route("/v1/health", get(health))
        .route("/v1/reload", post(reload))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves in the background; returns the bound address.
pub async fn spawn(state: Arc<AppState>, addr: &str) -> crate::error::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::Service(format!("bind {addr}: {e}")))?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router(state)).await;
    });
    Ok((local, handle))
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: &str) -> crate::error::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::Service(format!("bind {addr}: {e}")))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Service(e.to_string()))
}
