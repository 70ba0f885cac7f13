//! HTTP service for the screening loop.
//!
//! Endpoints (all JSON):
//!
//! | method | path | |
//! |---|---|---|
//! | GET  | `/api/queue?annotator=<id>&kind=<memory\|query_pair>` | pending items for one annotator, id order |
//! | POST | `/api/verdict` | body `{item_id, annotator_id, decision, reason?}` |
//! | GET  | `/api/progress` | verdict counts per kind and annotator |
//! | GET  | `/api/agreement?kind=<…>[&required=N]` | finalize report, or 409 with the missing pairs |
//!
//! Anything else is served from the static directory, if one is configured.
//! Errors come back as `{"error": <name>, "message": …}` plus the
//! `missing` list for `IncompleteVerdicts`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use rolecheck_core::screening::{
    Decision, ItemKind, KindProgress, MissingVerdict, ReviewItem, ScreeningError, ScreeningReport, ScreeningStore,
    Verdict,
};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("PortBusy: {0} is already in use")]
    PortBusy(SocketAddr),
    #[error("could not start review service on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("review service failed: {0}")]
    Serve(#[source] std::io::Error),
}

impl ReviewError {
    pub fn name(&self) -> &'static str {
        match self {
            ReviewError::PortBusy(_) => "PortBusy",
            ReviewError::Bind { .. } => "BindError",
            ReviewError::Serve(_) => "ServeError",
        }
    }
}

/// Shared service state.
pub struct ReviewState {
    store: RwLock<ScreeningStore>,
    required_annotators: usize,
}

impl ReviewState {
    pub fn new(store: ScreeningStore, required_annotators: usize) -> Arc<Self> {
        Arc::new(ReviewState {
            store: RwLock::new(store),
            required_annotators,
        })
    }

    /// Runs `f` against the store (for tests and embedding).
    pub fn with_store<T>(&self, f: impl FnOnce(&ScreeningStore) -> T) -> T {
        f(&self.store.read().expect("store lock poisoned"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing: Option<Vec<MissingVerdict>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unassigned_annotators: Option<usize>,
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError(
            StatusCode::BAD_REQUEST,
            ErrorBody {
                error: "BadRequest".into(),
                message: message.into(),
                missing: None,
                unassigned_annotators: None,
            },
        )
    }
}

impl From<ScreeningError> for ApiError {
    fn from(err: ScreeningError) -> Self {
        let status = match &err {
            ScreeningError::UnknownItem(_) => StatusCode::NOT_FOUND,
            ScreeningError::AlreadyFinalized { .. } | ScreeningError::IncompleteVerdicts { .. } => StatusCode::CONFLICT,
            ScreeningError::InvalidAnnotator | ScreeningError::InvalidRules(_) => StatusCode::BAD_REQUEST,
            ScreeningError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let (missing, unassigned) = match &err {
            ScreeningError::IncompleteVerdicts {
                missing,
                unassigned_annotators,
            } => (Some(missing.clone()), Some(*unassigned_annotators)),
            _ => (None, None),
        };
        ApiError(
            status,
            ErrorBody {
                error: err.name().to_string(),
                message: err.to_string(),
                missing,
                unassigned_annotators: unassigned,
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn parse_kind(kind: Option<&str>) -> Result<ItemKind, ApiError> {
    kind.unwrap_or("memory").parse().map_err(ApiError::bad_request)
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    annotator: Option<String>,
    kind: Option<String>,
}

async fn queue(
    State(state): State<Arc<ReviewState>>,
    Query(params): Query<QueueParams>,
) -> Result<Json<Vec<ReviewItem>>, ApiError> {
    let annotator = params
        .annotator
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| ApiError::bad_request("missing 'annotator' parameter"))?;
    let kind = parse_kind(params.kind.as_deref())?;
    let items = state.with_store(|s| s.queue(&annotator, kind).into_iter().cloned().collect());
    Ok(Json(items))
}

/// Body of `POST /api/verdict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub item_id: String,
    pub annotator_id: String,
    pub decision: Decision,
    #[serde(default)]
    pub reason: Option<String>,
}

async fn verdict(
    State(state): State<Arc<ReviewState>>,
    Json(req): Json<VerdictRequest>,
) -> Result<Json<Verdict>, ApiError> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut store = state.store.write().expect("store lock poisoned");
    let v = store.record_verdict(&req.item_id, &req.annotator_id, req.decision, req.reason, now)?;
    log::debug!("verdict {} by {}: {:?}", v.item_id, v.annotator_id, v.decision);
    Ok(Json(v))
}

async fn progress(State(state): State<Arc<ReviewState>>) -> Json<Vec<KindProgress>> {
    Json(state.with_store(|s| s.progress()))
}

#[derive(Debug, Deserialize)]
struct AgreementParams {
    kind: Option<String>,
    required: Option<usize>,
}

async fn agreement(
    State(state): State<Arc<ReviewState>>,
    Query(params): Query<AgreementParams>,
) -> Result<Json<ScreeningReport>, ApiError> {
    let kind = parse_kind(params.kind.as_deref())?;
    let required = params.required.unwrap_or(state.required_annotators);
    Ok(Json(state.with_store(|s| s.finalize_intersection(kind, required))?))
}

const PLACEHOLDER_INDEX: &str = "<!doctype html>\n<title>rolecheck review</title>\n<p>No UI bundle configured. \
The screening API is available under <code>/api/</code>.</p>\n";

/// Builds the router. `static_dir` holds the UI bundle served at `/`.
pub fn router(state: Arc<ReviewState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/verdict", post(verdict))
        .route("/api/progress", get(progress))
        .route("/api/agreement", get(agreement))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_INDEX) })),
    }
}

fn bind(addr: SocketAddr) -> Result<std::net::TcpListener, ReviewError> {
    let listener = std::net::TcpListener::bind(addr).map_err(|source| {
        if source.kind() == std::io::ErrorKind::AddrInUse {
            ReviewError::PortBusy(addr)
        } else {
            ReviewError::Bind { addr, source }
        }
    })?;
    listener.set_nonblocking(true).map_err(|source| ReviewError::Bind { addr, source })?;
    Ok(listener)
}

/// Serves until the process is interrupted.
pub fn serve(addr: SocketAddr, state: Arc<ReviewState>, static_dir: Option<PathBuf>) -> Result<(), ReviewError> {
    let listener = bind(addr)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(ReviewError::Serve)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener).map_err(ReviewError::Serve)?;
        log::info!("review service listening on http://{}", listener.local_addr().map_err(ReviewError::Serve)?);
        axum::serve(listener, router(state, static_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(ReviewError::Serve)
    })
}

/// A service running on a background thread; stopped on drop.
pub struct RunningService {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningService {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Starts the service on a background thread. Port 0 picks a free port.
pub fn spawn(addr: SocketAddr, state: Arc<ReviewState>, static_dir: Option<PathBuf>) -> Result<RunningService, ReviewError> {
    let listener = bind(addr)?;
    let local = listener.local_addr().map_err(|source| ReviewError::Bind { addr, source })?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            let _ = axum::serve(listener, router(state, static_dir))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(RunningService {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
