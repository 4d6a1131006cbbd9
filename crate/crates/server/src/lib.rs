//! Job service: every operation runs as a background job created over
//! HTTP/JSON and polled for status and progress rows.
//!
//! Routes:
//! - `GET /health`
//! - `POST /v1/jobs` with a [`JobRequest`] body
//! - `GET /v1/jobs`
//! - `GET /v1/jobs/{id}`
//! - `GET /v1/jobs/{id}/records?from=n`
//! - `POST /v1/jobs/{id}/cancel`

pub mod jobs;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tvlab_api::{ErrorBody, Health, JobKind, JobRequest, JobState, JobStatus, RecordPage};
use tvlab_core::Error;

struct Job {
    kind: JobKind,
    state: JobState,
    records: Vec<String>,
    error: Option<String>,
    result: Option<serde_json::Value>,
    cancel: Arc<AtomicBool>,
}

impl Job {
    fn status(&self, id: u64) -> JobStatus {
        JobStatus {
            id,
            kind: self.kind,
            state: self.state,
            records: self.records.len(),
            error: self.error.clone(),
            result: self.result.clone(),
        }
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    jobs: Arc<Mutex<BTreeMap<u64, Job>>>,
    next: Arc<AtomicU64>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

fn not_found(id: u64) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("no job {id}"))
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn create(State(st): State<AppState>, Json(req): Json<JobRequest>) -> Result<(StatusCode, Json<JobStatus>), ApiError> {
    jobs::validate(&req).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let id = st.next.fetch_add(1, Ordering::Relaxed) + 1;
    let cancel = Arc::new(AtomicBool::new(false));
    let job = Job {
        kind: req.kind,
        state: JobState::Queued,
        records: Vec::new(),
        error: None,
        result: None,
        cancel: cancel.clone(),
    };
    let status = job.status(id);
    st.jobs.lock().unwrap().insert(id, job);
    log::info!("job {id}: {} queued", req.kind);

    let jobs = st.jobs.clone();
    tokio::task::spawn_blocking(move || {
        let set = |f: &mut dyn FnMut(&mut Job)| {
            if let Some(j) = jobs.lock().unwrap().get_mut(&id) {
                f(j);
            }
        };
        if cancel.load(Ordering::Relaxed) {
            set(&mut |j| j.state = JobState::Cancelled);
            return;
        }
        set(&mut |j| j.state = JobState::Running);
        let mut sink = |row: String| set(&mut |j| j.records.push(row.clone()));
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| jobs::run(&req, &cancel, &mut sink)));
        set(&mut |j| match &out {
            Ok(Ok(v)) => {
                j.state = JobState::Succeeded;
                j.result = Some(v.clone());
            }
            Ok(Err(Error::Cancelled)) => j.state = JobState::Cancelled,
            Ok(Err(e)) => {
                j.state = JobState::Failed;
                j.error = Some(e.to_string());
            }
            Err(_) => {
                j.state = JobState::Failed;
                j.error = Some("job panicked".into());
            }
        });
        log::info!("job {id} finished");
    });
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn list(State(st): State<AppState>) -> Json<Vec<JobStatus>> {
    Json(st.jobs.lock().unwrap().iter().map(|(id, j)| j.status(*id)).collect())
}

async fn status(State(st): State<AppState>, Path(id): Path<u64>) -> Result<Json<JobStatus>, ApiError> {
    let jobs = st.jobs.lock().unwrap();
    jobs.get(&id).map(|j| Json(j.status(id))).ok_or_else(|| not_found(id))
}

#[derive(Deserialize)]
struct From {
    #[serde(default)]
    from: usize,
}

async fn records(
    State(st): State<AppState>,
    Path(id): Path<u64>,
    Query(q): Query<From>,
) -> Result<Json<RecordPage>, ApiError> {
    let jobs = st.jobs.lock().unwrap();
    let j = jobs.get(&id).ok_or_else(|| not_found(id))?;
    Ok(Json(RecordPage {
        from: q.from,
        records: j.records.get(q.from..).unwrap_or_default().to_vec(),
        state: j.state,
    }))
}

async fn cancel(State(st): State<AppState>, Path(id): Path<u64>) -> Result<Json<JobStatus>, ApiError> {
    let mut jobs = st.jobs.lock().unwrap();
    let j = jobs.get_mut(&id).ok_or_else(|| not_found(id))?;
    j.cancel.store(true, Ordering::Relaxed);
    if j.state == JobState::Queued {
        j.state = JobState::Cancelled;
    }
    Ok(Json(j.status(id)))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/jobs", post(create).get(list))
        .route("/v1/jobs/{id}", get(status))
        .route("/v1/jobs/{id}/records", get(records))
        .route("/v1/jobs/{id}/cancel", post(cancel))
        .with_state(state)
}

/// Serves on `listener` until the task is dropped or aborted.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::default())).await
}

/// Binds `addr` (port 0 picks a free one) and serves in the background.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(listener))))
}
