//! HTTP routes. Every error body is `{"code": ..., "message": ...}`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use adhd_eeg::bundle::{BundleError, ModelBundle, SegmentVote};
use adhd_eeg::eeg_io::{parse_recording, Label};
use adhd_eeg::pipeline::PipelineError;
use adhd_eeg::preprocess::PreprocessError;

use crate::assets;
use crate::protocol::TrialView;
use crate::session::{SessionError, Status, Thresholds, DISCLAIMER};
use crate::store::{SessionStore, StoreError};

pub const DEFAULT_TRIALS_PER_TEST: usize = 20;
const MAX_UPLOAD_BYTES: usize = 64 << 20;
const INDEX_HTML: &str = include_str!("../static/index.html");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Session logs live under `<data_dir>/sessions`.
    pub data_dir: PathBuf,
    pub thresholds: Thresholds,
    /// Model bundle served by the inference endpoint.
    pub model_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("loading model from {path}: {source}")]
    Model { path: PathBuf, source: BundleError },
}

struct LoadedModel {
    id: String,
    bundle: ModelBundle,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<SessionStore>,
    model: Option<Arc<LoadedModel>>,
}

impl AppState {
    pub fn open(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let store = SessionStore::open(&cfg.data_dir.join("sessions"), cfg.thresholds.clone())?;
        let model = match &cfg.model_dir {
            Some(dir) => Some(Arc::new(load_model(dir)?)),
            None => None,
        };
        Ok(AppState {
            store: Arc::new(store),
            model,
        })
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    /// Identifier clients pass as `model_id`: the bundle directory's name.
    pub fn model_id(&self) -> Option<&str> {
        self.model.as_deref().map(|m| m.id.as_str())
    }
}

fn load_model(dir: &Path) -> Result<LoadedModel, ServiceError> {
    let bundle = ModelBundle::load(dir).map_err(|source| ServiceError::Model {
        path: dir.to_path_buf(),
        source,
    })?;
    let id = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".to_string());
    Ok(LoadedModel { id, bundle })
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::UnknownSession(_) | SessionError::UnknownTrial(_) => StatusCode::NOT_FOUND,
            SessionError::DuplicateResponse(_) | SessionError::SessionIncomplete { .. } => StatusCode::CONFLICT,
            SessionError::BadConfig(_)
            | SessionError::NonPositiveReactionTime(_)
            | SessionError::ImplausibleReactionTime { .. }
            | SessionError::OutOfDomainResponse { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Session(s) => s.into(),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", other.to_string()),
        }
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}", get(session_status))
        .route("/api/v1/sessions/{id}/trials/next", get(next_trial))
        .route("/api/v1/sessions/{id}/responses", post(submit_response))
        .route("/api/v1/sessions/{id}/summary", get(summary))
        .route("/api/v1/infer", post(infer))
        .route("/api/v1/assets", get(asset_manifest))
        .route("/api/v1/assets/{image_id}", get(asset))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    trials_per_test: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub seed: u64,
    pub trials_per_test: usize,
    pub answered: usize,
    pub total: usize,
    pub status: Status,
}

fn status_of(s: &crate::session::ScreeningSession) -> SessionStatus {
    SessionStatus {
        session_id: s.session_id.clone(),
        seed: s.seed,
        trials_per_test: s.trials_per_test,
        answered: s.records.len(),
        total: s.trials.len(),
        status: s.status,
    }
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionStatus>), ApiError> {
    let req: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        parse_json(&body)?
    };
    let seed = req.seed.unwrap_or_else(rand::random);
    let session = st.store.create(req.trials_per_test.unwrap_or(DEFAULT_TRIALS_PER_TEST), seed)?;
    Ok((StatusCode::CREATED, Json(status_of(&session))))
}

async fn session_status(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionStatus>, ApiError> {
    Ok(Json(status_of(&st.store.snapshot(&id)?)))
}

#[derive(Serialize, Deserialize)]
pub struct NextTrial {
    pub answered: usize,
    pub total: usize,
    /// `None` once every trial is answered.
    pub trial: Option<TrialView>,
}

async fn next_trial(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<NextTrial>, ApiError> {
    let s = st.store.snapshot(&id)?;
    Ok(Json(NextTrial {
        answered: s.records.len(),
        total: s.trials.len(),
        trial: s.next_trial().map(|t| t.view()),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitResponse {
    trial_id: String,
    /// A string, or a bare number for orientation answers.
    response: serde_json::Value,
    stimulus_onset_ms: f64,
    response_ms: f64,
}

async fn submit_response(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<crate::session::TrialRecord>), ApiError> {
    let req: SubmitResponse = parse_json(&body)?;
    let response = match &req.response {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Number(n) => n.to_string(),
        other => return Err(ApiError::bad_request(format!("response must be a string or number, got {other}"))),
    };
    let record = st
        .store
        .respond(&id, &req.trial_id, &response, req.stimulus_onset_ms, req.response_ms)?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn summary(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<crate::session::SessionSummary>, ApiError> {
    Ok(Json(st.store.summary(&id)?))
}

#[derive(Deserialize)]
struct InferQuery {
    model_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct InferResponse {
    pub model_id: String,
    pub subject_id: String,
    pub n_segments: usize,
    pub p_control: f64,
    pub p_adhd: f64,
    pub label: Label,
    pub votes: Vec<SegmentVote>,
    pub disclaimer: String,
}

fn pipeline_error(e: BundleError) -> ApiError {
    match e {
        BundleError::Pipeline(PipelineError::Preprocess(
            p @ (PreprocessError::InsufficientLength { .. } | PreprocessError::TooShort { .. }),
        )) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "insufficient_length", p.to_string()),
        BundleError::Pipeline(p) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "pipeline_error", p.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "inference_error", other.to_string()),
    }
}

async fn infer(
    State(st): State<AppState>,
    Query(q): Query<InferQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<InferResponse>, ApiError> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    if !content_type.starts_with("text/plain") {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            "upload the EEG-CSV document as text/plain",
        ));
    }
    let model = st
        .model
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_model_loaded", "the service was started without a model"))?;
    if let Some(requested) = &q.model_id {
        if requested != &model.id {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_model",
                format!("model {requested:?} is not loaded (available: {:?})", model.id),
            ));
        }
    }
    let text = String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let rec = parse_recording(&text).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_recording", e.to_string()))?;
    let out = tokio::task::spawn_blocking(move || model.bundle.infer(&rec).map(|r| (model.id.clone(), r)))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "inference_error", e.to_string()))?;
    let (model_id, r) = out.map_err(pipeline_error)?;
    Ok(Json(InferResponse {
        model_id,
        subject_id: r.subject_id,
        n_segments: r.n_segments,
        p_control: r.p_control,
        p_adhd: r.p_adhd,
        label: r.label,
        votes: r.votes,
        disclaimer: DISCLAIMER.to_string(),
    }))
}

async fn asset_manifest() -> Json<Vec<assets::AssetEntry>> {
    Json(assets::manifest())
}

async fn asset(UrlPath(image_id): UrlPath<String>) -> Result<Response, ApiError> {
    let icon = assets::icon(&image_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_asset", format!("no image {image_id:?}")))?;
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], icon.svg()).into_response())
}
