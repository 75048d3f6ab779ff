//! HTTP API over persisted annotation sessions.
//!
//! Every session has one writer at a time (verdicts are queued on a fair
//! async mutex and appended to the session log in arrival order); readers
//! only clone the latest published snapshot.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bias_audit::annotation::{AnnotationSession, ItemPayload, Progress, SessionMeta, VerdictSubmission};
use bias_audit::metrics::BiasCountTable;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("unknown session {0}")]
    UnknownSession(String),

    #[error("session id {0} is served twice")]
    DuplicateSession(String),

    #[error(transparent)]
    Audit(#[from] bias_audit::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        use bias_audit::Error as E;
        let message = self.to_string();
        let (status, body) = match self {
            ServerError::UnknownSession(_) => (StatusCode::NOT_FOUND, json!({ "error": message })),
            ServerError::Audit(E::UnknownItem(_)) => (StatusCode::NOT_FOUND, json!({ "error": message })),
            ServerError::Audit(E::AlreadyJudged { existing, .. }) => (
                StatusCode::CONFLICT,
                json!({ "error": message, "existing": existing }),
            ),
            ServerError::Audit(E::Unjudged(ids)) => (
                StatusCode::CONFLICT,
                json!({ "error": message, "unjudged": ids }),
            ),
            ServerError::Audit(E::UnknownFeature { .. } | E::InvalidVerdict(_)) => {
                (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": message }))
            }
            ServerError::Io(ref e) if e.kind() == std::io::ErrorKind::NotFound => {
                (StatusCode::NOT_FOUND, json!({ "error": message }))
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": message })),
        };
        (status, Json(body)).into_response()
    }
}

/// Read-only view published after every write.
#[derive(Debug)]
struct Snapshot {
    meta: SessionMeta,
    next: Option<ItemPayload>,
    overlays: BTreeMap<String, PathBuf>,
    unjudged: Vec<String>,
    partial_export: BiasCountTable,
}

impl Snapshot {
    fn of(session: &AnnotationSession) -> Result<Self, ServerError> {
        let overlays = session
            .items()
            .iter()
            .map(|i| Ok((i.item_id.clone(), session.overlay_path(&i.item_id)?)))
            .collect::<Result<_, bias_audit::Error>>()?;
        Ok(Snapshot {
            meta: session.meta(),
            next: session.next_item(),
            overlays,
            unjudged: session.unjudged(),
            partial_export: session.export_counts(true)?,
        })
    }
}

struct SessionHandle {
    writer: Mutex<AnnotationSession>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl SessionHandle {
    fn new(session: AnnotationSession) -> Result<Self, ServerError> {
        let snapshot = Snapshot::of(&session)?;
        Ok(SessionHandle {
            writer: Mutex::new(session),
            snapshot: RwLock::new(Arc::new(snapshot)),
        })
    }

    fn read(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    async fn submit(&self, item_id: &str, submission: VerdictSubmission) -> Result<Progress, ServerError> {
        let mut session = self.writer.lock().await;
        let progress = session.submit_verdict(item_id, submission)?;
        let snapshot = Arc::new(Snapshot::of(&session)?);
        *self.snapshot.write().unwrap_or_else(|p| p.into_inner()) = snapshot;
        Ok(progress)
    }
}

/// Sessions served by one process, keyed by id.
#[derive(Clone)]
pub struct AppState {
    sessions: Arc<BTreeMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    /// Opens every session directory (replaying its verdict log).
    pub fn open(dirs: &[PathBuf]) -> Result<Self, ServerError> {
        let mut sessions = BTreeMap::new();
        for dir in dirs {
            let session = AnnotationSession::open(dir)?;
            let id = session.id().to_string();
            if sessions.contains_key(&id) {
                return Err(ServerError::DuplicateSession(id));
            }
            sessions.insert(id, Arc::new(SessionHandle::new(session)?));
        }
        Ok(AppState {
            sessions: Arc::new(sessions),
        })
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.keys().cloned().collect()
    }

    fn get(&self, id: &str) -> Result<&Arc<SessionHandle>, ServerError> {
        self.sessions
            .get(id)
            .ok_or_else(|| ServerError::UnknownSession(id.to_string()))
    }
}

async fn list_sessions(State(state): State<AppState>) -> Json<Vec<SessionMeta>> {
    Json(state.sessions.values().map(|h| h.read().meta.clone()).collect())
}

async fn session_meta(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionMeta>, ServerError> {
    Ok(Json(state.get(&id)?.read().meta.clone()))
}

/// The item at the cursor; 204 once every item is judged.
async fn next_item(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ServerError> {
    Ok(match &state.get(&id)?.read().next {
        Some(payload) => Json(payload.clone()).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit_verdict(
    State(state): State<AppState>,
    UrlPath((id, item_id)): UrlPath<(String, String)>,
    Json(submission): Json<VerdictSubmission>,
) -> Result<Json<Progress>, ServerError> {
    let handle = state.get(&id)?.clone();
    Ok(Json(handle.submit(&item_id, submission).await?))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    partial: bool,
}

async fn export(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Json<BiasCountTable>, ServerError> {
    let snapshot = state.get(&id)?.read();
    if !q.partial && !snapshot.unjudged.is_empty() {
        return Err(bias_audit::Error::Unjudged(snapshot.unjudged.clone()).into());
    }
    Ok(Json(snapshot.partial_export.clone()))
}

async fn overlay(
    State(state): State<AppState>,
    UrlPath((id, item_id)): UrlPath<(String, String)>,
) -> Result<Response, ServerError> {
    let snapshot = state.get(&id)?.read();
    let path = snapshot
        .overlays
        .get(&item_id)
        .ok_or_else(|| bias_audit::Error::UnknownItem(item_id.clone()))?;
    let bytes = tokio::fs::read(path).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Routes of the review API; `ui_dir`, when given, is served read-only at
/// every other path.
pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}", get(session_meta))
        .route("/sessions/{id}/items/next", get(next_item))
        .route("/sessions/{id}/items/{item_id}/verdict", post(submit_verdict))
        .route("/sessions/{id}/items/{item_id}/overlay.png", get(overlay))
        .route("/sessions/{id}/export", get(export))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState, ui_dir: Option<&Path>) -> Result<(), ServerError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "serving {} session(s) on http://{}",
        state.sessions.len(),
        listener.local_addr()?
    );
    axum::serve(listener, router(state, ui_dir)).await?;
    Ok(())
}
