//! HTTP/JSON service over in-memory sessions.
//!
//! Every response carries the session's model revision, in the body where
//! the body is an object and always as an `ETag`. `PATCH .../model` honors
//! `If-Match` and rejects stale revisions with 409.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ptsim_core::discovery::discover;
use ptsim_core::enrichment::{enrich, EnrichError};
use ptsim_core::event_log::{ingest_csv, to_csv_string, ColumnMapping, TimestampFormat};
use ptsim_core::spectrum::spectrum_diff;
use ptsim_core::ParameterPatch;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{Mutex, RwLock};

use crate::session::{ConfigOverride, Scenario, Session, SessionError, Snapshot};

const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Mutex<Session>>>>>,
    snapshot_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(snapshot_dir: Option<PathBuf>) -> Self {
        Self {
            sessions: Arc::default(),
            snapshot_dir,
        }
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session `{id}`")))
    }

    async fn insert(&self, session: Session) -> Arc<Mutex<Session>> {
        let id = session.id.clone();
        let shared = Arc::new(Mutex::new(session));
        self.sessions.write().await.insert(id, shared.clone());
        shared
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, name: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": name, "message": message.into() }),
        }
    }

    fn not_found(what: String) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", format!("unknown {what}"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::Log(_) => StatusCode::BAD_REQUEST,
            SessionError::Model(EnrichError::Log(_)) => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let mut out = ApiError::new(status, e.name(), e.to_string());
        if let SessionError::Model(EnrichError::InvariantViolation { invariant, .. }) = &e {
            out.body["invariant"] = json!(invariant);
        }
        out
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn etag(revision: u64) -> [(header::HeaderName, HeaderValue); 1] {
    [(header::ETAG, HeaderValue::from_str(&format!("\"{revision}\"")).expect("ascii digits"))]
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/restore", post(restore_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/model", get(get_model).patch(patch_model))
        .route("/sessions/{id}/simulate", post(simulate_scenario))
        .route("/sessions/{id}/scenarios", get(list_scenarios))
        .route("/sessions/{id}/scenarios/{k}/comparison", get(scenario_comparison))
        .route("/sessions/{id}/scenarios/{k}/spectrum", get(scenario_spectrum))
        .route("/sessions/{id}/scenarios/{k}/log", get(scenario_log))
        .route("/sessions/{id}/scenarios/{k}/report", get(scenario_report))
        .route("/sessions/{id}/snapshot", get(get_snapshot).post(save_snapshot))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

#[derive(Debug, Default, Deserialize)]
pub struct UploadQuery {
    case_id: Option<String>,
    activity: Option<String>,
    resource: Option<String>,
    timestamp: Option<String>,
    /// strftime pattern; ISO-8601 when absent.
    timestamp_format: Option<String>,
}

async fn read_upload(req: Request) -> Result<Bytes, ApiError> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.starts_with("multipart/form-data"));
    if !multipart {
        return Bytes::from_request(req, &()).await.map_err(|e| ApiError::bad_request(e.body_text()));
    }
    let mut form = Multipart::from_request(req, &())
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut first = None;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        let is_log = field.name() == Some("log");
        let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        if is_log {
            return Ok(data);
        }
        first.get_or_insert(data);
    }
    first.ok_or_else(|| ApiError::bad_request("multipart body has no log field"))
}

async fn create_session(State(state): State<AppState>, Query(q): Query<UploadQuery>, req: Request) -> Result<Response, ApiError> {
    let body = read_upload(req).await?;
    let defaults = ColumnMapping::default();
    let mapping = ColumnMapping {
        case_id: q.case_id.unwrap_or(defaults.case_id),
        activity: q.activity.unwrap_or(defaults.activity),
        resource: q.resource.unwrap_or(defaults.resource),
        timestamp: q.timestamp.unwrap_or(defaults.timestamp),
    };
    let format = q.timestamp_format.map_or(TimestampFormat::Iso8601, TimestampFormat::Custom);
    let session = tokio::task::spawn_blocking(move || -> Result<Session, SessionError> {
        let log = ingest_csv(body.as_ref(), &mapping, &format)?;
        let tree = discover(&log)?;
        let model = enrich(&tree, &log)?;
        Ok(Session::new(uuid::Uuid::new_v4().to_string(), log, model))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    let body = json!({
        "session_id": session.id,
        "revision": session.revision,
        "tree": session.model.tree.to_string(),
        "model": session.model,
        "config": session.config,
    });
    let rev = session.revision;
    state.insert(session).await;
    Ok((StatusCode::CREATED, etag(rev), Json(body)).into_response())
}

async fn restore_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let snapshot: Snapshot = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let session = tokio::task::spawn_blocking(move || Session::restore(snapshot))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    let body = json!({
        "session_id": session.id,
        "revision": session.revision,
        "scenarios": session.scenarios().len(),
    });
    let rev = session.revision;
    state.insert(session).await;
    Ok((StatusCode::CREATED, etag(rev), Json(body)).into_response())
}

async fn session_summary(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let shared = state.session(&id).await?;
    let s = shared.lock().await;
    let body = json!({
        "session_id": s.id,
        "revision": s.revision,
        "config": s.config,
        "scenarios": s.scenarios().len(),
        "pending_patches": s.pending().len(),
    });
    Ok((etag(s.revision), Json(body)).into_response())
}

fn model_body(s: &Session) -> Value {
    json!({
        "session_id": s.id,
        "revision": s.revision,
        "tree": s.model.tree.to_string(),
        "model": s.model,
        "config": s.config,
    })
}

async fn get_model(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let shared = state.session(&id).await?;
    let s = shared.lock().await;
    Ok((etag(s.revision), Json(model_body(&s))).into_response())
}

fn if_match(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(raw) = headers.get(header::IF_MATCH) else { return Ok(None) };
    let text = raw.to_str().map_err(|_| ApiError::bad_request("If-Match is not ASCII"))?.trim();
    if text == "*" {
        return Ok(None);
    }
    let bare = text.trim_start_matches("W/").trim_matches('"');
    bare.parse()
        .map(Some)
        .map_err(|_| ApiError::bad_request(format!("If-Match `{text}` is not a revision")))
}

async fn patch_model(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let shared = state.session(&id).await?;
    let expected = if_match(&headers)?;
    let patch: ParameterPatch = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let mut s = shared.lock().await;
    if let Some(rev) = expected.filter(|&r| r != s.revision) {
        let mut err = ApiError::new(
            StatusCode::CONFLICT,
            "StaleRevision",
            format!("revision {rev} is stale; current is {}", s.revision),
        );
        err.body["revision"] = json!(s.revision);
        return Err(err);
    }
    s.apply(patch).map_err(ApiError::from)?;
    Ok((etag(s.revision), Json(model_body(&s))).into_response())
}

async fn simulate_scenario(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let shared = state.session(&id).await?;
    let over: ConfigOverride = if body.iter().all(u8::is_ascii_whitespace) {
        ConfigOverride::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?
    };
    // the session stays locked for the run: one writer per session
    let mut s = shared.lock().await;
    let config = s.effective_config(&over);
    let (original, model, revision, patches) = (s.original_log.clone(), s.model.clone(), s.revision, s.pending().to_vec());
    let scenario = tokio::task::spawn_blocking(move || Scenario::compute(&original, &model, config, revision, patches))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    let k = s.push(scenario);
    let body = json!({ "session_id": s.id, "revision": s.revision, "scenario": k, "config": config });
    Ok((StatusCode::CREATED, etag(s.revision), Json(body)).into_response())
}

async fn list_scenarios(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let shared = state.session(&id).await?;
    let s = shared.lock().await;
    let list: Vec<Value> = s
        .scenarios()
        .iter()
        .enumerate()
        .map(|(k, sc)| {
            json!({
                "scenario": k,
                "revision": sc.revision,
                "config": sc.config,
                "patches": sc.patches,
                "emd": sc.comparison.plan.emd,
                "new_fraction": sc.comparison.delta.new_fraction,
                "removed_fraction": sc.comparison.delta.removed_fraction,
            })
        })
        .collect();
    let body = json!({ "session_id": s.id, "revision": s.revision, "scenarios": list });
    Ok((etag(s.revision), Json(body)).into_response())
}

async fn scenario_of(state: &AppState, id: &str, k: usize) -> Result<(Arc<Scenario>, u64, String), ApiError> {
    let shared = state.session(id).await?;
    let s = shared.lock().await;
    let sc = s.scenario(k).ok_or_else(|| ApiError::not_found(format!("scenario {k}")))?;
    Ok((sc, s.revision, s.id.clone()))
}

async fn scenario_comparison(State(state): State<AppState>, Path((id, k)): Path<(String, usize)>) -> Result<Response, ApiError> {
    let (sc, rev, sid) = scenario_of(&state, &id, k).await?;
    let body = json!({
        "session_id": sid,
        "revision": rev,
        "scenario": k,
        "delta": sc.comparison.delta,
        "plan": sc.comparison.plan,
    });
    Ok((etag(rev), Json(body)).into_response())
}

#[derive(Debug, Default, Deserialize)]
pub struct SpectrumQuery {
    /// Seconds; the per-segment default when absent.
    tolerance: Option<f64>,
}

async fn scenario_spectrum(
    State(state): State<AppState>,
    Path((id, k)): Path<(String, usize)>,
    Query(q): Query<SpectrumQuery>,
) -> Result<Response, ApiError> {
    let (sc, rev, _) = scenario_of(&state, &id, k).await?;
    let records = match q.tolerance {
        None => sc.spectrum.clone(),
        Some(t) if t.is_finite() && t >= 0.0 => {
            let shared = state.session(&id).await?;
            let original = shared.lock().await.original_log.clone();
            spectrum_diff(&original, &sc.log, Some(t))
        }
        Some(t) => return Err(ApiError::bad_request(format!("tolerance {t} must be ≥ 0"))),
    };
    Ok((etag(rev), Json(records)).into_response())
}

async fn scenario_log(State(state): State<AppState>, Path((id, k)): Path<(String, usize)>) -> Result<Response, ApiError> {
    let (sc, rev, _) = scenario_of(&state, &id, k).await?;
    let headers = [
        (header::CONTENT_TYPE, HeaderValue::from_static("text/csv")),
        (
            header::CONTENT_DISPOSITION,
            HeaderValue::from_str(&format!("attachment; filename=\"scenario-{k}.csv\"")).expect("ascii"),
        ),
    ];
    Ok((etag(rev), headers, to_csv_string(&sc.log)).into_response())
}

async fn scenario_report(State(state): State<AppState>, Path((id, k)): Path<(String, usize)>) -> Result<Response, ApiError> {
    let shared = state.session(&id).await?;
    let s = shared.lock().await;
    let report = s.report(k).ok_or_else(|| ApiError::not_found(format!("scenario {k}")))?;
    Ok((etag(s.revision), Json(report)).into_response())
}

async fn get_snapshot(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let shared = state.session(&id).await?;
    let s = shared.lock().await;
    Ok((etag(s.revision), Json(s.snapshot())).into_response())
}

async fn save_snapshot(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let dir = state
        .snapshot_dir
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "NoSnapshotDir", "the service was started without a snapshot directory"))?;
    let shared = state.session(&id).await?;
    let s = shared.lock().await;
    let path = dir.join(format!("{}.json", s.id));
    let text = serde_json::to_string_pretty(&s.snapshot()).expect("snapshot serializes");
    tokio::fs::write(&path, text)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
    let body = json!({ "session_id": s.id, "revision": s.revision, "path": path });
    Ok((StatusCode::CREATED, etag(s.revision), Json(body)).into_response())
}

/// Serves until the process is stopped.
pub async fn serve(port: u16, snapshot_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(snapshot_dir))).await
}
