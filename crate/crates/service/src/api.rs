//! HTTP session API.

use crate::session::{CreateRequest, FeedbackRequest, ServiceData, ServiceError, Session};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};
use tokio::sync::Mutex;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

struct Entry {
    session: Arc<Mutex<Session>>,
    expires: Instant,
}

/// In-memory sessions with sliding expiry. Each session has its own lock so
/// requests to one session are serialised while others proceed.
pub struct SessionStore {
    ttl: Duration,
    entries: std::sync::Mutex<HashMap<String, Entry>>,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        SessionStore {
            ttl,
            entries: Default::default(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Entry>> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn insert(&self, session: Session) {
        let id = session.id.clone();
        let entry = Entry {
            session: Arc::new(Mutex::new(session)),
            expires: Instant::now() + self.ttl,
        };
        self.lock().insert(id, entry);
    }

    /// Looks a session up and extends its lifetime.
    fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        let mut map = self.lock();
        let now = Instant::now();
        if map.get(id).is_some_and(|e| e.expires <= now) {
            map.remove(id);
            return None;
        }
        let e = map.get_mut(id)?;
        e.expires = now + self.ttl;
        Some(e.session.clone())
    }

    fn remove(&self, id: &str) -> bool {
        self.lock().remove(id).is_some()
    }

    /// Drops expired sessions; returns how many were removed.
    pub fn evict_expired(&self) -> usize {
        let now = Instant::now();
        let mut map = self.lock();
        let before = map.len();
        map.retain(|_, e| e.expires > now);
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone)]
pub struct AppState {
    pub data: Arc<ServiceData>,
    pub store: Arc<SessionStore>,
    /// Append-only trajectory files, one per session, when set.
    pub trajectory_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(data: ServiceData, ttl: Duration, trajectory_dir: Option<PathBuf>) -> Self {
        AppState {
            data: Arc::new(data),
            store: Arc::new(SessionStore::new(ttl)),
            trajectory_dir,
        }
    }

    /// Appends the rounds from `from_round` on; `None` starts the file with the initial state.
    fn persist(&self, session: &Session, from_round: Option<usize>) {
        let Some(dir) = &self.trajectory_dir else { return };
        let path = dir.join(format!("{}.jsonl", session.id));
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
            if from_round.is_none() {
                serde_json::to_writer(&mut f, &json!({ "initial": session.initial }))?;
                f.write_all(b"\n")?;
            }
            for r in &session.records[from_round.unwrap_or(0)..] {
                serde_json::to_writer(&mut f, r)?;
                f.write_all(b"\n")?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            log::warn!("could not persist trajectory to {}: {e}", path.display());
        }
    }
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/feedback", post(post_feedback))
        .with_state(state)
}

/// Periodically evicts expired sessions.
pub fn spawn_sweeper(store: Arc<SessionStore>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let n = store.evict_expired();
            if n > 0 {
                log::info!("evicted {n} expired sessions");
            }
        }
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(ServiceError::Invalid(format!("malformed body: {e}"))))
}

fn not_found(id: &str) -> ApiError {
    ApiError(ServiceError::NotFound(format!("unknown session {id}")))
}

async fn healthz(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "sessions": st.store.len(),
        "checkpoints": st.data.checkpoints.keys().collect::<Vec<_>>(),
    }))
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse_json(&body)?;
    let data = st.data.clone();
    let id = uuid::Uuid::new_v4().to_string();
    let (session, reply) = tokio::task::spawn_blocking(move || Session::create(&data, id, &req))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    st.persist(&session, None);
    st.store.insert(session);
    Ok((StatusCode::CREATED, Json(reply)).into_response())
}

async fn post_feedback(
    State(st): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|k| !k.is_empty())
        .ok_or_else(|| ServiceError::BadRequest(format!("missing {IDEMPOTENCY_HEADER} header")))?
        .to_string();
    let req: FeedbackRequest = parse_json(&body)?;
    let session = st.store.get(&id).ok_or_else(|| not_found(&id))?;
    let guard = session.lock_owned().await;
    let data = st.data.clone();
    let (guard, before, reply) = tokio::task::spawn_blocking(move || {
        let mut guard = guard;
        let before = guard.records.len();
        let reply = guard.feedback(&data, &key, &req);
        (guard, before, reply)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?;
    let reply = reply?;
    if guard.records.len() > before {
        st.persist(&guard, Some(before));
    }
    Ok(Json(reply).into_response())
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = st.store.get(&id).ok_or_else(|| not_found(&id))?;
    let guard = session.lock().await;
    Ok(Json(guard.snapshot(&st.data)).into_response())
}

async fn delete_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    if st.store.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(not_found(&id))
    }
}
