//! HTTP service for the annotation platform.
//!
//! Tiles and descriptors are public and served straight from the pyramid
//! directory. Everything under `/api` needs an `Authorization: Bearer
//! <token>` header; requests without a valid token get 403. Errors are JSON
//! documents `{"code": ..., "message": ...}`.

pub mod error;
pub mod pipeline;
pub mod reports;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::header::{AUTHORIZATION, CACHE_CONTROL, CONTENT_TYPE, ETAG, IF_NONE_MATCH};
use axum::http::request::Parts;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use gigaslide_core::pyramid::TilePyramidDescriptor;
use gigaslide_core::Config;
use gigaslide_store::{NewAnnotation, Role, SlideRecord, Store, Style, User, Validation, WsiLabel};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use error::ApiError;

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

/// Status of one prediction upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub slide: String,
    pub state: JobState,
    pub predictions: usize,
    pub polygons: Option<usize>,
    pub proposals: Option<usize>,
    pub error: Option<String>,
}

#[derive(Default)]
struct Jobs {
    next_id: AtomicU64,
    by_id: Mutex<BTreeMap<u64, Job>>,
    latest: Mutex<HashMap<String, u64>>,
    /// One lock per slide so jobs on a slide run one at a time while
    /// distinct slides proceed in parallel.
    slide_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl Jobs {
    fn update(&self, id: u64, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.by_id.lock().get_mut(&id) {
            f(job);
        }
    }

    fn slide_lock(&self, slide: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.slide_locks.lock().entry(slide.to_string()).or_default().clone()
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub config: Arc<Config>,
    jobs: Arc<Jobs>,
}

impl AppState {
    pub fn new(store: Arc<Store>, config: Config) -> Self {
        Self {
            store,
            config: Arc::new(config),
            jobs: Arc::default(),
        }
    }

    pub fn job(&self, id: u64) -> Option<Job> {
        self.jobs.by_id.lock().get(&id).cloned()
    }
}

/// Runs store and pipeline work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

/// The authenticated user behind a request.
pub struct Caller(pub User);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|h| h.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| ApiError::forbidden("missing bearer token"))?
            .to_string();
        let store = state.store.clone();
        blocking(move || Ok(store.user_by_token(&token)?))
            .await?
            .map(Caller)
            .ok_or_else(|| ApiError::forbidden("invalid token"))
    }
}

impl Caller {
    fn require_expert(&self) -> ApiResult<()> {
        if self.0.role == Role::Expert {
            Ok(())
        } else {
            Err(ApiError::forbidden(format!("{} is not an expert", self.0.name)))
        }
    }
}

fn path<T>(p: Result<Path<T>, PathRejection>) -> ApiResult<T> {
    p.map(|Path(v)| v).map_err(|e| ApiError::not_found(e.body_text()))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    Ok(serde_json::from_slice(body)?)
}

fn parse_id(raw: &str) -> ApiResult<i64> {
    raw.parse().map_err(|_| ApiError::not_found(format!("annotation {raw}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/tiles/{file}", get(descriptor))
        .route("/tiles/{dir}/{level}/{tile}", get(tile))
        .route("/api/classes", get(classes))
        .route("/api/batches", get(list_batches))
        .route("/api/batches/{batch}/manifest", get(manifest))
        .route("/api/annotations", get(list_annotations).post(create_annotation))
        .route("/api/annotations/{id}", get(get_annotation).delete(delete_annotation))
        .route("/api/annotations/{id}/validation", put(set_validation))
        .route("/api/annotations/{id}/style", put(set_style))
        .route("/api/slides/{slide}/label", put(put_label).get(get_label))
        .route("/api/sessions/events", post(session_event))
        .route("/api/predictions/{slide}", post(upload_predictions).get(prediction_status))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/reports/{kind}", get(report))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

/// Binds and serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

// ---- tiles -----------------------------------------------------------------

fn etag_for(bytes: &[u8]) -> String {
    format!("\"{:x}\"", Sha256::digest(bytes))
}

fn immutable_body(headers: &HeaderMap, bytes: Vec<u8>, content_type: &'static str) -> Response {
    let etag = etag_for(&bytes);
    let cache = [
        (ETAG, HeaderValue::from_str(&etag).expect("hex etag")),
        (CACHE_CONTROL, HeaderValue::from_static("public, max-age=86400, no-transform")),
    ];
    let matches = headers
        .get(IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    if matches {
        return (StatusCode::NOT_MODIFIED, cache).into_response();
    }
    (cache, [(CONTENT_TYPE, HeaderValue::from_static(content_type))], bytes).into_response()
}

async fn slide_record(state: &AppState, slide: String) -> ApiResult<SlideRecord> {
    let store = state.store.clone();
    blocking(move || Ok(store.slide(&slide)?)).await
}

async fn read_file(p: PathBuf) -> ApiResult<Vec<u8>> {
    tokio::fs::read(&p).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ApiError::not_found(format!("{} is missing", p.display())),
        _ => ApiError::internal(format!("{}: {e}", p.display())),
    })
}

async fn descriptor(State(state): State<AppState>, headers: HeaderMap, file: Result<Path<String>, PathRejection>) -> ApiResult<Response> {
    let file = path(file)?;
    let slide = file
        .strip_suffix(".dzi")
        .ok_or_else(|| ApiError::not_found(format!("{file} is not a descriptor")))?;
    let record = slide_record(&state, slide.to_string()).await?;
    let bytes = read_file(PathBuf::from(&record.pyramid_dir).join(&file)).await?;
    Ok(immutable_body(&headers, bytes, "application/xml"))
}

async fn tile(
    State(state): State<AppState>,
    headers: HeaderMap,
    p: Result<Path<(String, String, String)>, PathRejection>,
) -> ApiResult<Response> {
    let (dir, level, tile) = path(p)?;
    let missing = || ApiError::not_found(format!("no tile {dir}/{level}/{tile}"));
    let slide = dir.strip_suffix("_files").ok_or_else(missing)?;
    let level: u32 = level.parse().map_err(|_| missing())?;
    let (stem, ext) = tile.rsplit_once('.').ok_or_else(missing)?;
    let (col, row) = stem.split_once('_').ok_or_else(missing)?;
    let (col, row): (u32, u32) = (col.parse().map_err(|_| missing())?, row.parse().map_err(|_| missing())?);

    let record = slide_record(&state, slide.to_string()).await?;
    let format = pipeline::slide_format(&record)?;
    if ext != format.extension() {
        return Err(missing());
    }
    let desc = TilePyramidDescriptor::new(&record.name, record.width, record.height, record.tile_size, record.overlap, format)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    if !desc.contains_tile(level, col, row) {
        return Err(missing());
    }
    let bytes = read_file(desc.tile_path(&PathBuf::from(&record.pyramid_dir), level, col, row)).await?;
    Ok(immutable_body(&headers, bytes, format.content_type()))
}

// ---- batches ---------------------------------------------------------------

async fn classes(State(state): State<AppState>, _caller: Caller) -> Json<Vec<String>> {
    Json(state.store.classes().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub name: String,
    pub dense: bool,
    pub slides: usize,
}

async fn list_batches(State(state): State<AppState>, Caller(user): Caller) -> ApiResult<Json<Vec<BatchSummary>>> {
    let store = state.store.clone();
    blocking(move || {
        Ok(Json(
            store
                .batches()?
                .into_iter()
                .filter(|b| b.assigned_users.contains(&user.name))
                .map(|b| BatchSummary {
                    name: b.name,
                    dense: b.dense,
                    slides: b.slide_names.len(),
                })
                .collect(),
        ))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_name: String,
    pub descriptor_url: String,
    /// Whether the viewer should hide the reference diagnosis.
    pub class_hidden: bool,
    pub pending_proposals: u64,
    pub width: u32,
    pub height: u32,
    pub scale_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub batch_name: String,
    pub dense: bool,
    pub slides: Vec<ManifestEntry>,
}

async fn manifest(
    State(state): State<AppState>,
    Caller(user): Caller,
    batch: Result<Path<String>, PathRejection>,
) -> ApiResult<Json<BatchManifest>> {
    let batch = path(batch)?;
    let store = state.store.clone();
    blocking(move || {
        store.authorize(&batch, &user.name)?;
        let b = store.batch(&batch)?;
        let slides = b
            .slide_names
            .iter()
            .map(|s| {
                let record = store.slide(s)?;
                Ok(ManifestEntry {
                    slide_name: s.clone(),
                    descriptor_url: format!("/tiles/{s}.dzi"),
                    class_hidden: user.role != Role::Expert,
                    pending_proposals: store.pending_count(&batch, s, &user.name)?,
                    width: record.width,
                    height: record.height,
                    scale_factor: record.scale_factor,
                })
            })
            .collect::<ApiResult<Vec<_>>>()?;
        Ok(Json(BatchManifest {
            batch_name: b.name,
            dense: b.dense,
            slides,
        }))
    })
    .await
}

// ---- annotations -----------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ViewQuery {
    batch: String,
    slide: String,
}

async fn list_annotations(
    State(state): State<AppState>,
    Caller(user): Caller,
    q: Result<Query<ViewQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    let store = state.store.clone();
    blocking(move || Ok(Json(store.query_annotations(&q.batch, &q.slide, &user.name)?).into_response())).await
}

async fn create_annotation(State(state): State<AppState>, Caller(user): Caller, body: Bytes) -> ApiResult<Response> {
    let new: NewAnnotation = json(&body)?;
    let store = state.store.clone();
    let a = blocking(move || Ok(store.put_annotation(&user.name, &new)?)).await?;
    Ok((StatusCode::CREATED, Json(a)).into_response())
}

async fn get_annotation(
    State(state): State<AppState>,
    Caller(user): Caller,
    id: Result<Path<String>, PathRejection>,
) -> ApiResult<Response> {
    let id = parse_id(&path(id)?)?;
    let store = state.store.clone();
    blocking(move || Ok(Json(store.annotation(id, &user.name)?).into_response())).await
}

async fn delete_annotation(
    State(state): State<AppState>,
    Caller(user): Caller,
    id: Result<Path<String>, PathRejection>,
) -> ApiResult<StatusCode> {
    let id = parse_id(&path(id)?)?;
    let store = state.store.clone();
    blocking(move || Ok(store.delete_annotation(id, &user.name)?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct ValidationBody {
    status: Validation,
}

async fn set_validation(
    State(state): State<AppState>,
    Caller(user): Caller,
    id: Result<Path<String>, PathRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let id = parse_id(&path(id)?)?;
    let body: ValidationBody = json(&body)?;
    let store = state.store.clone();
    blocking(move || Ok(Json(store.set_validation(id, body.status, &user.name)?).into_response())).await
}

async fn set_style(
    State(state): State<AppState>,
    Caller(user): Caller,
    id: Result<Path<String>, PathRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let id = parse_id(&path(id)?)?;
    let style: Style = json(&body)?;
    let store = state.store.clone();
    blocking(move || Ok(Json(store.set_style(id, &style, &user.name)?).into_response())).await
}

// ---- slide labels ----------------------------------------------------------

#[derive(Debug, Deserialize)]
struct LabelBody {
    class_label: String,
    certainty: u8,
    #[serde(default)]
    observations: String,
}

/// Experts may label any slide; annotators only slides in their batches.
fn may_label(store: &Store, user: &User, slide: &str) -> ApiResult<()> {
    store.slide(slide)?;
    if user.role == Role::Expert
        || store.batches_for_slide(slide)?.iter().any(|b| b.assigned_users.contains(&user.name))
    {
        Ok(())
    } else {
        Err(ApiError::forbidden(format!("{} has no batch containing {slide}", user.name)))
    }
}

async fn put_label(
    State(state): State<AppState>,
    Caller(user): Caller,
    slide: Result<Path<String>, PathRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let slide = path(slide)?;
    let body: LabelBody = json(&body)?;
    let store = state.store.clone();
    blocking(move || {
        may_label(&store, &user, &slide)?;
        let label = store.upsert_wsi_label(&WsiLabel {
            slide_name: slide,
            user_name: user.name,
            class_label: body.class_label,
            certainty: body.certainty,
            observations: body.observations,
        })?;
        Ok(Json(label).into_response())
    })
    .await
}

async fn get_label(
    State(state): State<AppState>,
    Caller(user): Caller,
    slide: Result<Path<String>, PathRejection>,
) -> ApiResult<Response> {
    let slide = path(slide)?;
    let store = state.store.clone();
    blocking(move || {
        may_label(&store, &user, &slide)?;
        store
            .wsi_labels()?
            .into_iter()
            .find(|l| l.slide_name == slide && l.user_name == user.name)
            .map(|l| Json(l).into_response())
            .ok_or_else(|| ApiError::not_found(format!("no label by {} on {slide}", user.name)))
    })
    .await
}

// ---- timing ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SessionEventKind {
    Open,
    Close,
}

#[derive(Debug, Deserialize)]
struct SessionEvent {
    slide: String,
    batch: String,
    event: SessionEventKind,
    /// Milliseconds since the epoch; server time when absent.
    timestamp: Option<i64>,
}

async fn session_event(State(state): State<AppState>, Caller(user): Caller, body: Bytes) -> ApiResult<Response> {
    let ev: SessionEvent = json(&body)?;
    let at = ev.timestamp.unwrap_or_else(gigaslide_store::now_ms);
    let store = state.store.clone();
    blocking(move || match ev.event {
        SessionEventKind::Open => {
            store.open_session(&user.name, &ev.slide, &ev.batch, at)?;
            Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "status": "open", "opened_at": at }))).into_response())
        }
        SessionEventKind::Close => {
            let s = store.close_session(&user.name, &ev.slide, &ev.batch, at)?;
            Ok((StatusCode::CREATED, Json(s)).into_response())
        }
    })
    .await
}

// ---- predictions -----------------------------------------------------------

async fn upload_predictions(
    State(state): State<AppState>,
    caller: Caller,
    slide: Result<Path<String>, PathRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    caller.require_expert()?;
    let slide = path(slide)?;
    let text = String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("body is not UTF-8 text"))?;
    let store = state.store.clone();
    let name = slide.clone();
    // Reject bad files before queueing so the caller gets the reason now.
    let predictions = blocking(move || {
        let record = store.slide(&name)?;
        let preds = pipeline::parse_predictions(&text, Some(&name))?;
        pipeline::check_on_grid(&preds, &pipeline::slide_grid(&record)?)?;
        Ok(preds)
    })
    .await?;

    let id = state.jobs.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    let job = Job {
        id,
        slide: slide.clone(),
        state: JobState::Queued,
        predictions: predictions.len(),
        polygons: None,
        proposals: None,
        error: None,
    };
    state.jobs.by_id.lock().insert(id, job.clone());
    state.jobs.latest.lock().insert(slide.clone(), id);

    let bg = state.clone();
    tokio::spawn(async move {
        let lock = bg.jobs.slide_lock(&slide);
        let _guard = lock.lock().await;
        bg.jobs.update(id, |j| j.state = JobState::Running);
        let (store, config) = (bg.store.clone(), bg.config.clone());
        let result = blocking(move || Ok(pipeline::run_predictions(&store, &config, &slide, &predictions)?)).await;
        bg.jobs.update(id, |j| match result {
            Ok(outcome) => {
                j.state = JobState::Succeeded;
                j.polygons = Some(outcome.polygons);
                j.proposals = Some(outcome.proposal_ids.len());
            }
            Err(e) => {
                log::error!("prediction job {id} failed: {}", e.message);
                j.state = JobState::Failed;
                j.error = Some(e.message);
            }
        });
    });
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn prediction_status(
    State(state): State<AppState>,
    _caller: Caller,
    slide: Result<Path<String>, PathRejection>,
) -> ApiResult<Json<Job>> {
    let slide = path(slide)?;
    let id = state.jobs.latest.lock().get(&slide).copied();
    id.and_then(|id| state.job(id))
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no prediction job for {slide}")))
}

async fn job_status(
    State(state): State<AppState>,
    _caller: Caller,
    id: Result<Path<String>, PathRejection>,
) -> ApiResult<Json<Job>> {
    let raw = path(id)?;
    raw.parse()
        .ok()
        .and_then(|id| state.job(id))
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("job {raw}")))
}

// ---- reports ---------------------------------------------------------------

async fn report(
    State(state): State<AppState>,
    caller: Caller,
    kind: Result<Path<String>, PathRejection>,
    filters: Result<Query<reports::ReportFilters>, QueryRejection>,
) -> ApiResult<Response> {
    caller.require_expert()?;
    let kind = path(kind)?;
    let filters = query(filters)?;
    let (store, cap) = (state.store.clone(), state.config.session_cap_ms());
    blocking(move || Ok(Json(reports::build_report(&store, &kind, &filters, cap)?).into_response())).await
}
