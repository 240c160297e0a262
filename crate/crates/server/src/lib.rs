//! The coopadapt HTTP service.
//!
//! Short requests (`generate`, `eval`) answer synchronously. Training and sweeps run as
//! background jobs that clients poll under `/v1/jobs/{id}`.

mod jobs;
mod runs;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coopadapt_api::{
    AdaptRequest, ApiError, ErrorBody, ErrorKind, EvalRequest, GenerateRequest, GenerateResponse, Health,
    JobAccepted, JobStatus, PretrainRequest, ProfileSpec, SweepRequest,
};
use coopadapt_core::evaluation::evaluate;
use coopadapt_core::synthgen::{generate_dataset, DomainProfile, ProfileName};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use jobs::JobRegistry;

/// Error returned by a handler, rendered as `{"error": {...}}`.
#[derive(Debug)]
pub struct HttpError(pub ApiError);

impl HttpError {
    pub fn config(message: impl Into<String>) -> Self {
        HttpError(ApiError {
            kind: ErrorKind::Config,
            message: message.into(),
        })
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        HttpError(ApiError {
            kind: ErrorKind::Runtime,
            message: message.into(),
        })
    }

    fn not_found(message: impl Into<String>) -> Self {
        HttpError(ApiError {
            kind: ErrorKind::NotFound,
            message: message.into(),
        })
    }
}

impl From<coopadapt_core::Error> for HttpError {
    fn from(e: coopadapt_core::Error) -> Self {
        HttpError(classify(&e))
    }
}

/// Input problems (bad config, unusable dataset) versus failures while running.
pub fn classify(e: &coopadapt_core::Error) -> ApiError {
    use coopadapt_core::Error as E;
    let kind = match e {
        E::Config(_) | E::Dataset(_) => ErrorKind::Config,
        _ => ErrorKind::Runtime,
    };
    ApiError {
        kind,
        message: e.to_string(),
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let status = match self.0.kind {
            ErrorKind::Config => StatusCode::BAD_REQUEST,
            ErrorKind::Runtime => StatusCode::INTERNAL_SERVER_ERROR,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
        };
        (status, Json(ErrorBody { error: self.0 })).into_response()
    }
}

type HttpResult<T> = Result<Json<T>, HttpError>;

#[derive(Clone)]
pub struct AppState {
    pub jobs: Arc<JobRegistry>,
}

impl AppState {
    /// `max_running` bounds how many training jobs execute at once; the rest queue.
    pub fn new(max_running: usize) -> Self {
        AppState {
            jobs: Arc::new(JobRegistry::new(max_running)),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/generate", post(generate))
        .route("/v1/eval", post(eval))
        .route("/v1/train/pretrain", post(pretrain))
        .route("/v1/train/adapt", post(adapt))
        .route("/v1/sweep", post(sweep))
        .route("/v1/jobs", get(list_jobs))
        .route("/v1/jobs/{id}", get(job).delete(cancel_job))
        .with_state(state)
}

/// Binds `addr` and serves in a background task; returns the bound address.
pub async fn spawn(addr: SocketAddr, max_running: usize) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(AppState::new(max_running));
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            log::error!("server stopped: {e}");
        }
    });
    Ok((local, handle))
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, HttpError> + Send + 'static,
) -> Result<T, HttpError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| HttpError::runtime(format!("worker panicked: {e}")))?
}

async fn generate(Json(req): Json<GenerateRequest>) -> HttpResult<GenerateResponse> {
    let profile = match req.profile {
        ProfileSpec::Named(name) => DomainProfile::by_name(name.parse::<ProfileName>()?),
        ProfileSpec::Inline(p) => p,
    };
    profile.validate()?;
    let out = req.out;
    let (frames, seed) = (req.frames, req.seed);
    let manifest = blocking(move || Ok(generate_dataset(&profile, frames, &out, seed).map(|m| (m, out))?)).await?;
    let (manifest, out) = manifest;
    let mut warnings = Vec::new();
    if frames == 0 {
        warnings.push("zero frames requested; wrote a manifest-only dataset".to_string());
    }
    Ok(Json(GenerateResponse {
        out,
        frames: manifest.n_frames,
        boxes: manifest.frames.iter().map(|f| f.boxes).sum(),
        profile_hash: manifest.profile_hash,
        warnings,
    }))
}

async fn eval(Json(req): Json<EvalRequest>) -> HttpResult<coopadapt_core::evaluation::EvalReport> {
    let report = blocking(move || {
        let report = evaluate(&req.checkpoint, &req.dataset, &req.thresholds, req.csv.as_deref())?;
        if let Some(path) = &req.report {
            runs::write_json(path, &report)?;
        }
        Ok(report)
    })
    .await?;
    Ok(Json(report))
}

async fn pretrain(State(s): State<AppState>, Json(req): Json<PretrainRequest>) -> HttpResult<JobAccepted> {
    let plan = runs::plan_pretrain(req)?;
    Ok(Json(s.jobs.submit(plan)))
}

async fn adapt(State(s): State<AppState>, Json(req): Json<AdaptRequest>) -> HttpResult<JobAccepted> {
    let plan = runs::plan_adapt(req)?;
    Ok(Json(s.jobs.submit(plan)))
}

async fn sweep(State(s): State<AppState>, Json(req): Json<SweepRequest>) -> HttpResult<JobAccepted> {
    let plan = runs::plan_sweep(req)?;
    Ok(Json(s.jobs.submit(plan)))
}

async fn list_jobs(State(s): State<AppState>) -> Json<Vec<JobStatus>> {
    Json(s.jobs.list())
}

async fn job(State(s): State<AppState>, Path(id): Path<u64>) -> HttpResult<JobStatus> {
    s.jobs
        .status(id)
        .map(Json)
        .ok_or_else(|| HttpError::not_found(format!("no job {id}")))
}

async fn cancel_job(State(s): State<AppState>, Path(id): Path<u64>) -> HttpResult<JobStatus> {
    s.jobs
        .cancel(id)
        .map(Json)
        .ok_or_else(|| HttpError::not_found(format!("no job {id}")))
}
