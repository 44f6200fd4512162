//! Local HTTP API driven by the annotation UI.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/annotations` | annotation JSON |
//! | POST | `/mask-preview` | `{annotation, image_png_base64?, rngr?}` |
//! | POST | `/jobs` | `{kind, config}` |
//! | GET | `/jobs/{id}` | |
//! | GET | `/artifacts/{id}` | |

use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    cmd_evaluate, cmd_generate, cmd_train, preview_mask, ArtifactRecord, CommandContext, ErrorReport, EvaluateConfig,
    GenerateConfig, Job, JobKind, JobStore, MaskSidecar, ENV_PORT, SCHEMA_VERSION,
};
use crate::backbone::{Backbone, BackboneSpec};
use crate::config::{parse_config, resolve};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rngr::{PointAnnotation, RngrConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Root for stored annotations, previews and job outputs; relative
    /// paths in job configs resolve against it.
    pub data_dir: PathBuf,
    /// Backbone used for mask previews.
    pub backbone: BackboneSpec,
    pub ctx: CommandContext,
    /// Without a worker, jobs stay queued (useful in tests).
    pub start_worker: bool,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>, ctx: CommandContext) -> Self {
        Self { data_dir: data_dir.into(), backbone: BackboneSpec::default(), ctx, start_worker: true }
    }
}

struct QueuedJob {
    id: String,
    kind: JobKind,
    config: Value,
}

pub struct AppState {
    config: ServerConfig,
    backbone: Backbone,
    jobs: Arc<Mutex<JobStore>>,
    queue: Option<mpsc::Sender<QueuedJob>>,
}

fn lock(jobs: &Mutex<JobStore>) -> MutexGuard<'_, JobStore> {
    jobs.lock().unwrap_or_else(|p| p.into_inner())
}

/// Builds the shared state and, if configured, the single job worker.
pub fn build_state(config: ServerConfig) -> Result<Arc<AppState>> {
    std::fs::create_dir_all(&config.data_dir).map_err(|e| Error::io(&config.data_dir, e))?;
    let backbone = config.ctx.backbone(&config.backbone)?;
    let jobs = Arc::new(Mutex::new(JobStore::new()));
    let queue = if config.start_worker {
        let (tx, rx) = mpsc::channel::<QueuedJob>();
        let jobs = jobs.clone();
        let data_dir = config.data_dir.clone();
        let ctx = config.ctx.clone();
        std::thread::Builder::new()
            .name("p3s-jobs".into())
            .spawn(move || {
                for job in rx {
                    run_job(&jobs, &data_dir, &ctx, job);
                }
            })
            .map_err(|e| Error::State(format!("cannot start job worker: {e}")))?;
        Some(tx)
    } else {
        None
    };
    Ok(Arc::new(AppState { config, backbone, jobs, queue }))
}

fn run_job(jobs: &Arc<Mutex<JobStore>>, data_dir: &FsPath, ctx: &CommandContext, job: QueuedJob) {
    if let Err(e) = lock(jobs).start(&job.id) {
        log::error!("{e}");
        return;
    }
    let out = data_dir.join("jobs").join(&job.id);
    let id = job.id.clone();
    let mut progress = |f: f64| {
        let _ = lock(jobs).set_progress(&id, f);
    };
    let result = match job.kind {
        JobKind::Train => parse_config::<TrainConfig>(&job.config.to_string()).and_then(|mut c| {
            c.output_dir = out;
            cmd_train(&c, data_dir, ctx, &mut progress)
        }),
        JobKind::Generate => parse_config::<GenerateConfig>(&job.config.to_string()).and_then(|mut c| {
            c.output_dir = out;
            cmd_generate(&c, data_dir, ctx, &mut progress)
        }),
        JobKind::Evaluate => parse_config::<EvaluateConfig>(&job.config.to_string()).and_then(|mut c| {
            c.output_dir = out;
            cmd_evaluate(&c, data_dir, ctx)
        }),
    };
    let mut store = lock(jobs);
    let outcome = match result {
        Ok(report) => store.finish(&job.id, report.artifacts),
        Err(e) => {
            log::warn!("job {} failed: {e}", job.id);
            store.fail(&job.id, &e)
        }
    };
    if let Err(e) = outcome {
        log::error!("{e}");
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/annotations", post(post_annotation))
        .route("/mask-preview", post(post_mask_preview))
        .route("/jobs", post(post_job))
        .route("/jobs/{id}", get(get_job))
        .route("/artifacts/{id}", get(get_artifact))
        .with_state(state)
}

/// Port from `P3S_PORT`, default 8080.
pub fn port_from_env() -> Result<u16> {
    match std::env::var(ENV_PORT) {
        Ok(v) => v.parse().map_err(|_| Error::config(ENV_PORT, format!("not a port number: {v:?}"))),
        Err(_) => Ok(8080),
    }
}

pub async fn serve(config: ServerConfig, port: u16) -> Result<()> {
    let state = build_state(config)?;
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::State(format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(state)).await.map_err(|e| Error::State(format!("server error: {e}")))
}

struct ApiError {
    status: StatusCode,
    error: Error,
}

impl ApiError {
    fn new(status: StatusCode, error: Error) -> Self {
        Self { status, error }
    }

    fn bad_request(error: Error) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorReport::from(&self.error))).into_response()
    }
}

fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::Stage { source, .. } => status_for(source),
        Error::Io { .. } | Error::State(_) | Error::NonFinite(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> std::result::Result<T, ApiError> {
    let text = std::str::from_utf8(body).map_err(|_| ApiError::bad_request(Error::Input("body is not UTF-8".into())))?;
    parse_config(text).map_err(ApiError::bad_request)
}

async fn post_annotation(State(state): State<Arc<AppState>>, body: Bytes) -> std::result::Result<Json<Value>, ApiError> {
    let annotation: PointAnnotation = parse_body(&body)?;
    annotation.validate().map_err(ApiError::bad_request)?;
    let dir = state.config.data_dir.join("annotations");
    let id = annotation.id();
    let path = dir.join(format!("{id}.json"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(&dir, e))
        .and_then(|_| annotation.save(&path))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "id": id,
        "path": format!("annotations/{id}.json"),
        "annotation": annotation,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskPreviewRequest {
    annotation: PointAnnotation,
    /// Inline image; when absent the annotation's image path is read from
    /// the data directory.
    image_png_base64: Option<String>,
    #[serde(default)]
    rngr: RngrConfig,
}

#[derive(Debug, Serialize)]
struct MaskPreviewResponse {
    #[serde(flatten)]
    sidecar: MaskSidecar,
    mask_png_base64: String,
    overlay_png_base64: String,
    mask_artifact: String,
    overlay_artifact: String,
}

async fn post_mask_preview(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> std::result::Result<Json<MaskPreviewResponse>, ApiError> {
    let req: MaskPreviewRequest = parse_body(&body)?;
    req.annotation.validate().map_err(ApiError::bad_request)?;
    let image = match &req.image_png_base64 {
        Some(b64) => {
            let bytes = B64
                .decode(b64.trim())
                .map_err(|e| ApiError::bad_request(Error::Input(format!("image_png_base64: {e}"))))?;
            Image::decode(&bytes).map_err(ApiError::bad_request)?
        }
        None => {
            let path = resolve(&state.config.data_dir, FsPath::new(&req.annotation.image_ref));
            Image::load(&path).map_err(ApiError::bad_request)?
        }
    };
    let preview = preview_mask(&image, &req.annotation, &state.backbone, &req.rngr)
        .map_err(|e| ApiError::new(status_for(&e), e))?;

    let dir = state.config.data_dir.join("previews");
    let mut ids = Vec::with_capacity(2);
    for (suffix, bytes) in [("mask", &preview.mask_png), ("overlay", &preview.overlay_png)] {
        let path = dir.join(format!("{}_{suffix}.png", preview.sidecar.annotation_id));
        let record = std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(&dir, e))
            .and_then(|_| std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e)))
            .and_then(|_| ArtifactRecord::from_path(&path))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
        lock(&state.jobs).register_artifact(&record);
        ids.push(record.id);
    }
    let overlay_artifact = ids.pop().unwrap_or_default();
    let mask_artifact = ids.pop().unwrap_or_default();
    Ok(Json(MaskPreviewResponse {
        sidecar: preview.sidecar,
        mask_png_base64: B64.encode(&preview.mask_png),
        overlay_png_base64: B64.encode(&preview.overlay_png),
        mask_artifact,
        overlay_artifact,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    kind: JobKind,
    #[serde(default)]
    config: Value,
}

async fn post_job(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> std::result::Result<(StatusCode, Json<Job>), ApiError> {
    let req: JobRequest = parse_body(&body)?;
    let config = if req.config.is_null() { json!({}) } else { req.config };
    let job = lock(&state.jobs)
        .create(req.kind)
        .map_err(|e| ApiError::new(StatusCode::CONFLICT, e))?;
    if let Some(queue) = &state.queue {
        let queued = QueuedJob { id: job.id.clone(), kind: req.kind, config };
        if queue.send(queued).is_err() {
            let err = Error::State("job worker has stopped".into());
            let _ = lock(&state.jobs).fail(&job.id, &err);
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, err));
        }
    }
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> std::result::Result<Json<Job>, ApiError> {
    lock(&state.jobs)
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, Error::Input(format!("unknown job {id}"))))
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("jsonl") => "application/x-ndjson",
        Some("csv") => "text/csv",
        _ => "application/octet-stream",
    }
}

async fn get_artifact(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> std::result::Result<Response, ApiError> {
    let path = lock(&state.jobs)
        .artifact_path(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, Error::Input(format!("unknown artifact {id}"))))?;
    let bytes = std::fs::read(&path).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, Error::io(&path, e)))?;
    Ok((
        [
            (header::CONTENT_TYPE, content_type(&path).to_string()),
            (header::HeaderName::from_static("x-schema-version"), SCHEMA_VERSION.to_string()),
        ],
        bytes,
    )
        .into_response())
}
