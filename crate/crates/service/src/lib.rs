//! JSON-over-HTTP studio service under `/api/v1`.
//!
//! | method | path | body | result |
//! |---|---|---|---|
//! | POST | `/sessions` | | `{id}` |
//! | GET | `/sessions/{id}` | | session metadata |
//! | PUT | `/sessions/{id}/segmentation` | PNG bytes | label summary |
//! | POST | `/sessions/{id}/depths` | `{n, seed?}` | `{seed, candidates}` |
//! | POST | `/sessions/{id}/depths/{cid}/shift` | `{label, delta}` | candidate |
//! | POST | `/sessions/{id}/images` | `{candidate_id, n, seed?}` | `{seed, images}` |
//! | GET | `/sessions/{id}/assets/{aid}` | | PNG bytes |
//!
//! Errors are `{"error": code, "message": text}` with status 404 (unknown
//! session, candidate or asset), 409 (segmentation re-upload after
//! candidates exist, or sampling before upload) and 422 (invalid input;
//! order violations also carry `nearer`/`farther` label names).

pub mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use depthscape::data::png_io;
use depthscape::depth_ops::{segment_mean_depth, shift_segment_depth};
use depthscape::pipeline::{phase1_sample_depths, phase2_sample_images, DepthEdit};
use depthscape::{DepthMap, Error, Generator, Mode, SegmentationMap};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

pub use store::{CandidateInfo, ImageInfo, Session, SessionMeta, Store};

/// Upper bound on samples per request.
pub const MAX_SAMPLES: usize = 32;

/// The depth model and the image model, loaded once.
#[derive(Debug)]
pub struct Models {
    pub depth: Generator<f32>,
    pub image: Generator<f32>,
}

impl Models {
    pub fn new(depth: Generator<f32>, image: Generator<f32>) -> depthscape::Result<Self> {
        let (d, i) = (depth.config(), image.config());
        if d.mode != Mode::S2d {
            return Err(Error::InvalidConfig(format!("depth model has mode {}", d.mode)));
        }
        if i.mode == Mode::S2d {
            return Err(Error::InvalidConfig("image model has mode s2d".into()));
        }
        if d.label_set != i.label_set || d.output_resolution != i.output_resolution {
            return Err(Error::InvalidConfig(
                "depth and image models disagree on label set or resolution".into(),
            ));
        }
        Ok(Self { depth, image })
    }
}

#[derive(Clone)]
pub struct AppState {
    models: Arc<Models>,
    store: Arc<Store>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(models: Models, store: Store, workers: usize) -> Self {
        Self {
            models: Arc::new(models),
            store: Arc::new(store),
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Run blocking inference on the bounded worker pool.
    async fn infer<R: Send + 'static>(
        &self,
        f: impl FnOnce(&Models) -> depthscape::Result<R> + Send + 'static,
    ) -> Result<R, ApiError> {
        let _permit = self.workers.acquire().await.map_err(|_| ApiError::internal("worker pool closed"))?;
        let models = self.models.clone();
        tokio::task::spawn_blocking(move || f(&models))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(ApiError::from)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": code, "message": message.into() }),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn order_violation(seg: &SegmentationMap, nearer: usize, farther: usize) -> Self {
        let name = |l: usize| seg.label_set().name(l).unwrap_or("?").to_string();
        let (n, f) = (name(nearer), name(farther));
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({
                "error": "order_violation",
                "message": format!("`{n}` would no longer be nearer than `{f}`"),
                "nearer": n,
                "farther": f,
            }),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::File { .. } | Error::Json(_) | Error::Checkpoint(_) => {
                tracing::error!("{e}");
                Self::internal(e.to_string())
            }
            other => Self::invalid(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/segmentation", put(upload_segmentation))
        .route("/sessions/{id}/depths", post(request_depths))
        .route("/sessions/{id}/depths/{cid}/shift", post(shift_depth))
        .route("/sessions/{id}/images", post(request_images))
        .route("/sessions/{id}/assets/{aid}", get(fetch_asset));
    Router::new().nest("/api/v1", api).with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Settings for [`serve`] as read from the command line.
#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: SocketAddr,
    pub depth_checkpoint: PathBuf,
    pub image_checkpoint: PathBuf,
    pub workers: usize,
    pub persist_dir: Option<PathBuf>,
}

impl ServeConfig {
    pub fn load_state(&self) -> depthscape::Result<AppState> {
        let depth = depthscape::load_checkpoint(&self.depth_checkpoint)?.generator;
        let image = depthscape::load_checkpoint(&self.image_checkpoint)?.generator;
        let models = Models::new(depth, image)?;
        let store = match &self.persist_dir {
            Some(dir) => Store::persistent(dir, &models.depth.config().label_set)?,
            None => Store::in_memory(),
        };
        Ok(AppState::new(models, store, self.workers))
    }
}

fn session(state: &AppState, id: &str) -> ApiResult<store::SessionHandle> {
    state.store.get(id).ok_or_else(|| ApiError::not_found("session", id))
}

fn check_n(n: usize) -> ApiResult<usize> {
    if n == 0 || n > MAX_SAMPLES {
        return Err(ApiError::invalid(format!("n must be in 1..={MAX_SAMPLES}")));
    }
    Ok(n)
}

fn default_n() -> usize {
    4
}

fn pick_seed(seed: Option<u64>) -> u64 {
    // Kept within 32 bits so the value survives JSON number handling in browsers.
    seed.unwrap_or_else(|| rand::random::<u32>() as u64)
}

async fn create_session(State(state): State<AppState>) -> ApiResult<(StatusCode, Json<Value>)> {
    let id = state.store.create()?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionMeta>> {
    let s = session(&state, &id)?;
    let meta = s.lock().await.meta.clone();
    Ok(Json(meta))
}

async fn upload_segmentation(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let handle = session(&state, &id)?;
    let mut s = handle.lock().await;
    if !s.meta.candidates.is_empty() {
        return Err(ApiError::conflict("segmentation cannot change once depth candidates exist"));
    }
    let config = state.models.depth.config();
    let seg = png_io::decode_segmentation(&body, &config.label_set)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_segmentation", e.to_string()))?;
    let r = config.output_resolution;
    if seg.height() != r || seg.width() != r {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_segmentation",
            format!("segmentation is {}x{}, model expects {r}x{r}", seg.height(), seg.width()),
        ));
    }
    let labels: Vec<&str> = seg
        .present_labels()
        .into_iter()
        .filter_map(|l| seg.label_set().name(l))
        .collect();
    let body = json!({ "height": seg.height(), "width": seg.width(), "labels": labels });
    s.set_segmentation(seg);
    state.store.persist(&s)?;
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
pub struct DepthsRequest {
    #[serde(default = "default_n")]
    pub n: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct CandidateView {
    #[serde(flatten)]
    info: CandidateInfo,
    /// Mean depth per present label name.
    mean_depth: BTreeMap<String, f64>,
}

fn candidate_view(info: CandidateInfo, depth: &DepthMap, seg: &SegmentationMap) -> ApiResult<CandidateView> {
    let mean_depth = segment_mean_depth(depth, seg)?
        .into_iter()
        .map(|(l, v)| (seg.label_set().name(l).unwrap_or("?").to_string(), v))
        .collect();
    Ok(CandidateView { info, mean_depth })
}

fn require_seg(s: &Session) -> ApiResult<SegmentationMap> {
    s.segmentation
        .clone()
        .ok_or_else(|| ApiError::conflict("upload a segmentation first"))
}

async fn request_depths(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<DepthsRequest>,
) -> ApiResult<Json<Value>> {
    let n = check_n(req.n)?;
    let seed = pick_seed(req.seed);
    let handle = session(&state, &id)?;
    let mut s = handle.lock().await;
    let seg = require_seg(&s)?;
    let seg2 = seg.clone();
    let depths = state
        .infer(move |m| phase1_sample_depths(&m.depth, &seg2, n, seed))
        .await?;
    let mut views = Vec::with_capacity(n);
    for (index, d) in depths.iter().enumerate() {
        let info = s.add_candidate(d, seed, index, None, Vec::new())?;
        let (_, stored) = s.candidate(&info.id).expect("just added");
        views.push(candidate_view(info, stored, &seg)?);
    }
    state.store.persist(&s)?;
    Ok(Json(json!({ "seed": seed, "candidates": views })))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum LabelKey {
    Id(usize),
    Name(String),
}

#[derive(Debug, Deserialize)]
pub struct ShiftRequest {
    pub label: LabelKey,
    pub delta: f64,
}

async fn shift_depth(
    State(state): State<AppState>,
    Path((id, cid)): Path<(String, String)>,
    Json(req): Json<ShiftRequest>,
) -> ApiResult<(StatusCode, Json<CandidateView>)> {
    let handle = session(&state, &id)?;
    let mut s = handle.lock().await;
    let seg = require_seg(&s)?;
    let (parent, depth) = s.candidate(&cid).ok_or_else(|| ApiError::not_found("candidate", &cid))?;
    let label = match &req.label {
        LabelKey::Id(l) => seg.label_set().resolve(&l.to_string())?,
        LabelKey::Name(n) => seg.label_set().resolve(n)?,
    };
    if !req.delta.is_finite() {
        return Err(ApiError::invalid("delta must be finite"));
    }
    let edited = shift_segment_depth(depth, &seg, label, req.delta).map_err(|e| match e {
        Error::OrderViolation { nearer, farther } => ApiError::order_violation(&seg, nearer, farther),
        other => other.into(),
    })?;
    let (seed, index) = (parent.seed, parent.index);
    let mut edits = parent.edits.clone();
    edits.push(DepthEdit {
        label,
        delta: req.delta,
    });
    let info = s.add_candidate(&edited, seed, index, Some(cid), edits)?;
    state.store.persist(&s)?;
    let (_, stored) = s.candidate(&info.id).expect("just added");
    Ok((StatusCode::CREATED, Json(candidate_view(info, stored, &seg)?)))
}

#[derive(Debug, Deserialize)]
pub struct ImagesRequest {
    pub candidate_id: String,
    #[serde(default = "default_n")]
    pub n: usize,
    pub seed: Option<u64>,
}

async fn request_images(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ImagesRequest>,
) -> ApiResult<Json<Value>> {
    let n = check_n(req.n)?;
    let seed = pick_seed(req.seed);
    let handle = session(&state, &id)?;
    let mut s = handle.lock().await;
    let seg = require_seg(&s)?;
    let (_, depth) = s
        .candidate(&req.candidate_id)
        .ok_or_else(|| ApiError::not_found("candidate", &req.candidate_id))?;
    let depth = depth.clone();
    let images = state
        .infer(move |m| phase2_sample_images(&m.image, &seg, &depth, n, seed))
        .await?;
    let infos: Vec<ImageInfo> = images
        .iter()
        .enumerate()
        .map(|(index, img)| s.add_image(png_io::encode_image(img), &req.candidate_id, seed, index))
        .collect();
    state.store.persist(&s)?;
    Ok(Json(json!({ "seed": seed, "images": infos })))
}

async fn fetch_asset(State(state): State<AppState>, Path((id, aid)): Path<(String, String)>) -> ApiResult<Response> {
    let handle = session(&state, &id)?;
    let s = handle.lock().await;
    let png = s.asset(&aid).ok_or_else(|| ApiError::not_found("asset", &aid))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png.to_vec()).into_response())
}
