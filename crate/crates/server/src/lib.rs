//! Local HTTP API behind the annotation and results UI.
//!
//! The server keeps no state of its own: every request reads the
//! detections/annotations files and the experiment store, and every write
//! goes back to those files atomically. Annotation writes use optimistic
//! concurrency: clients send the revision they read (`If-Match`), and a
//! stale revision gets `409 Conflict`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::Mutex;

use camtrap_core::config::{CropStrategy, ExperimentConfig, ShiftFallback};
use camtrap_core::data::{self, AnnotationSet, ClassScheme, Detection, Label};
use camtrap_core::eval::PredictionRecord;
use camtrap_core::preprocess::{extract_crop, load_rgb, square_crop};
use camtrap_core::store::ExperimentStore;
use camtrap_core::Error;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8501";
pub const DEFAULT_PAGE_SIZE: usize = 24;
pub const MAX_PAGE_SIZE: usize = 500;

/// Where one dataset's images and files live.
#[derive(Clone, Debug, Serialize)]
pub struct DatasetSource {
    pub id: String,
    pub data_dir: PathBuf,
    pub detections_path: PathBuf,
    pub annotations_path: PathBuf,
    #[serde(skip)]
    pub crop_strategy: CropStrategy,
}

impl DatasetSource {
    /// Dataset described by an experiment config; the id is the data
    /// directory's name.
    pub fn from_config(config: &ExperimentConfig) -> Self {
        let id = config
            .io
            .data_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into());
        DatasetSource {
            id,
            data_dir: config.io.data_dir.clone(),
            detections_path: config.detections_path(),
            annotations_path: config.annotations_path(),
            crop_strategy: config.preprocessing.crop_strategy,
        }
    }
}

pub struct AppState {
    pub datasets: BTreeMap<String, DatasetSource>,
    pub store: ExperimentStore,
    pub static_dir: Option<PathBuf>,
    // one writer per annotations file
    locks: BTreeMap<String, Mutex<()>>,
}

impl AppState {
    pub fn new(datasets: Vec<DatasetSource>, store: ExperimentStore, static_dir: Option<PathBuf>) -> Self {
        let locks = datasets.iter().map(|d| (d.id.clone(), Mutex::new(()))).collect();
        AppState {
            datasets: datasets.into_iter().map(|d| (d.id.clone(), d)).collect(),
            store,
            static_dir,
            locks,
        }
    }

    /// Serve the dataset and store named in an experiment config.
    pub fn from_config(config: &ExperimentConfig, static_dir: Option<PathBuf>) -> Self {
        Self::new(
            vec![DatasetSource::from_config(config)],
            ExperimentStore::new(&config.io.model_dir),
            static_dir,
        )
    }

    fn dataset(&self, id: &str) -> Result<&DatasetSource, ApiError> {
        self.datasets
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("dataset `{id}` not found")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ExperimentNotFound(_) => StatusCode::NOT_FOUND,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            Error::UnknownLabel(_) | Error::InvalidValue { .. } | Error::SchemaViolation { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Revision token of a file: sha256 of its bytes (of nothing, if absent).
pub fn revision(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_default();
    hex::encode(Sha256::digest(&bytes))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/datasets", get(list_datasets))
        .route("/datasets/{id}/detections", get(get_detections))
        .route("/datasets/{id}/annotations", get(get_annotations))
        .route("/datasets/{id}/schemes", get(get_schemes).put(put_scheme))
        .route("/datasets/{id}/annotations/{bbox_id}", put(put_annotation))
        .route("/images/{bbox_id}", get(get_image))
        .route("/experiments", get(list_experiments))
        .route("/experiments/{id}", get(get_experiment))
        .route("/experiments/{id}/runs/{run_id}/{kind}", get(get_review))
        .route("/experiments/{id}/confusion", get(get_confusion))
        .fallback(static_file)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Serialize)]
struct DatasetInfo<'a> {
    #[serde(flatten)]
    source: &'a DatasetSource,
    has_detections: bool,
    detections: usize,
    labeled: usize,
}

async fn list_datasets(State(st): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    let mut out = Vec::new();
    for d in st.datasets.values() {
        let has = d.detections_path.is_file();
        let detections = if has { data::load_detections(&d.detections_path)?.len() } else { 0 };
        let ann = AnnotationSet::load_or_default(&d.annotations_path)?;
        let labeled = ann.records.values().filter(|m| m.values().any(|l| l.value().is_some())).count();
        out.push(DatasetInfo {
            source: d,
            has_detections: has,
            detections,
            labeled,
        });
    }
    Ok(Json(serde_json::to_value(out).expect("serializable")))
}

async fn get_detections(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<Detection>>> {
    let d = st.dataset(&id)?;
    Ok(Json(data::load_detections(&d.detections_path)?))
}

fn with_etag<T: IntoResponse>(body: T, rev: &str) -> Response {
    let mut resp = body.into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("\"{rev}\"")) {
        resp.headers_mut().insert(header::ETAG, v);
    }
    resp
}

async fn get_annotations(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let d = st.dataset(&id)?;
    let rev = revision(&d.annotations_path);
    let set = AnnotationSet::load_or_default(&d.annotations_path)?;
    Ok(with_etag(Json(json!({ "revision": rev, "annotations": set })), &rev))
}

async fn get_schemes(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let d = st.dataset(&id)?;
    let rev = revision(&d.annotations_path);
    let set = AnnotationSet::load_or_default(&d.annotations_path)?;
    Ok(with_etag(Json(set.schemes), &rev))
}

async fn put_scheme(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(scheme): Json<ClassScheme>,
) -> ApiResult<Response> {
    let d = st.dataset(&id)?;
    let _guard = st.locks[&id].lock().await;
    let mut set = AnnotationSet::load_or_default(&d.annotations_path)?;
    set.upsert_scheme(scheme).map_err(|e| match e {
        // removing a label that is still in use
        Error::InvalidValue { constraint, .. } if constraint.contains("in use") => {
            ApiError::new(StatusCode::CONFLICT, constraint)
        }
        other => other.into(),
    })?;
    set.save(&d.annotations_path)?;
    let rev = revision(&d.annotations_path);
    Ok(with_etag(Json(set.schemes), &rev))
}

fn if_match(headers: &HeaderMap) -> Option<String> {
    headers
        .get(header::IF_MATCH)
        .and_then(|v| v.to_str().ok())
        .map(|s| s.trim().trim_matches('"').to_string())
}

/// Body: scheme name -> label (or null to mark unlabeled).
async fn put_annotation(
    State(st): State<Arc<AppState>>,
    UrlPath((id, bbox_id)): UrlPath<(String, String)>,
    headers: HeaderMap,
    Json(labels): Json<BTreeMap<String, Label>>,
) -> ApiResult<Response> {
    let d = st.dataset(&id)?;
    let _guard = st.locks[&id].lock().await;
    let current = revision(&d.annotations_path);
    match if_match(&headers) {
        None => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("If-Match revision required (current: {current})"),
            ))
        }
        Some(r) if r != current && r != "*" => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("annotations changed since revision {r}; reload (current: {current})"),
            ))
        }
        Some(_) => {}
    }
    let detections = data::load_detections(&d.detections_path)?;
    if !detections.iter().any(|det| det.bbox_id == bbox_id) {
        return Err(ApiError::not_found(format!("bbox `{bbox_id}` not found")));
    }
    let mut set = AnnotationSet::load_or_default(&d.annotations_path)?;
    for (scheme, label) in labels {
        set.set_label(&bbox_id, &scheme, label)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    }
    set.save(&d.annotations_path)?;
    let rev = revision(&d.annotations_path);
    let labels = set.records.get(&bbox_id).cloned().unwrap_or_default();
    Ok(with_etag(Json(json!({ "bbox_id": bbox_id, "labels": labels, "revision": rev })), &rev))
}

#[derive(Deserialize)]
struct ImageQuery {
    mode: Option<String>,
    dataset: Option<String>,
}

fn content_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn get_image(
    State(st): State<Arc<AppState>>,
    UrlPath(bbox_id): UrlPath<String>,
    Query(q): Query<ImageQuery>,
) -> ApiResult<Response> {
    let candidates: Vec<&DatasetSource> = match &q.dataset {
        Some(id) => vec![st.dataset(id)?],
        None => st.datasets.values().collect(),
    };
    let mut found = None;
    for d in candidates {
        if !d.detections_path.is_file() {
            continue;
        }
        if let Some(det) = data::load_detections(&d.detections_path)?.into_iter().find(|x| x.bbox_id == bbox_id) {
            found = Some((d, det));
            break;
        }
    }
    let (d, det) = found.ok_or_else(|| ApiError::not_found(format!("bbox `{bbox_id}` not found")))?;
    let path = d.data_dir.join(&det.image_path);
    let b = det.bbox;
    let mut headers = vec![
        ("x-bbox-id", det.bbox_id.clone()),
        ("x-bbox", format!("{},{},{},{}", b.x_min, b.y_min, b.width, b.height)),
        ("x-confidence", det.confidence.to_string()),
    ];
    let (bytes, ctype) = match q.mode.as_deref().unwrap_or("full") {
        "full" => {
            let bytes = std::fs::read(&path).map_err(|e| ApiError::from(Error::io(&path, e)))?;
            if let Ok((w, h)) = image::image_dimensions(&path) {
                headers.push(("x-image-size", format!("{w}x{h}")));
            }
            (bytes, content_type_for(&path))
        }
        "crop" => {
            let img = load_rgb(&path)?;
            let spec = square_crop(&b, img.dimensions(), d.crop_strategy, ShiftFallback::Pad)?;
            headers.push(("x-image-size", format!("{}x{}", img.width(), img.height())));
            headers.push(("x-crop", format!("{},{},{}", spec.left, spec.top, spec.side)));
            let crop = extract_crop(&img, &spec);
            let mut out = Vec::new();
            crop.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            (out, "image/png")
        }
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("mode must be `full` or `crop`, got `{other}`"),
            ))
        }
    };
    let mut resp = Response::new(Body::from(bytes));
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static(ctype));
    for (k, v) in headers {
        if let Ok(v) = HeaderValue::from_str(&v) {
            h.insert(k, v);
        }
    }
    Ok(resp)
}

#[derive(Deserialize)]
struct ListQuery {
    scheme: Option<String>,
}

async fn list_experiments(State(st): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.store.list_experiments(q.scheme.as_deref())?))
}

async fn get_experiment(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let record = st.store.load_experiment(&id)?;
    let aggregate = st.store.load_aggregate(&id)?;
    let runs = st.store.load_results(&id)?;
    Ok(Json(json!({
        "experiment": record,
        "aggregate": aggregate,
        "runs": runs,
    })))
}

#[derive(Deserialize)]
struct PageQuery {
    page: Option<usize>,
    per_page: Option<usize>,
    predicted: Option<String>,
    #[serde(rename = "true")]
    truth: Option<String>,
}

#[derive(Serialize)]
pub struct Page<T> {
    pub total: usize,
    pub page: usize,
    pub per_page: usize,
    pub items: Vec<T>,
}

async fn get_review(
    State(st): State<Arc<AppState>>,
    UrlPath((id, run_id, kind)): UrlPath<(String, String, String)>,
    Query(q): Query<PageQuery>,
) -> ApiResult<Json<Page<PredictionRecord>>> {
    st.store.load_experiment(&id)?;
    let records = match kind.as_str() {
        "errors" => st.store.load_errors(&id, &run_id),
        "uncertain" => st.store.load_uncertain(&id, &run_id),
        _ => return Err(ApiError::not_found(format!("unknown review set `{kind}`"))),
    }
    .map_err(|e| match e {
        Error::Io { .. } => ApiError::not_found(format!("run `{run_id}` has no {kind} log")),
        other => other.into(),
    })?;
    let filtered: Vec<_> = records
        .into_iter()
        .filter(|r| q.predicted.as_ref().is_none_or(|p| &r.predicted_label == p))
        .filter(|r| q.truth.as_ref().is_none_or(|t| &r.true_label == t))
        .collect();
    let per_page = q.per_page.unwrap_or(DEFAULT_PAGE_SIZE).clamp(1, MAX_PAGE_SIZE);
    let page = q.page.unwrap_or(1).max(1);
    let items = filtered.iter().skip((page - 1) * per_page).take(per_page).cloned().collect();
    Ok(Json(Page {
        total: filtered.len(),
        page,
        per_page,
        items,
    }))
}

#[derive(Deserialize)]
struct ConfusionQuery {
    run: Option<String>,
}

async fn get_confusion(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ConfusionQuery>,
) -> ApiResult<impl IntoResponse> {
    st.store.load_experiment(&id)?;
    let run = q.run.unwrap_or_else(|| "aggregate".into());
    let (labels, matrix) = if run == "aggregate" {
        let agg = st
            .store
            .load_aggregate(&id)?
            .ok_or_else(|| ApiError::not_found(format!("experiment `{id}` has no aggregate yet")))?;
        (agg.labels, agg.confusion)
    } else {
        let r = st
            .store
            .load_result(&id, &run)
            .map_err(|_| ApiError::not_found(format!("run `{run}` has no result")))?;
        (r.metrics.labels, r.metrics.confusion)
    };
    Ok(Json(json!({ "run": run, "labels": labels, "matrix": matrix })))
}

async fn static_file(State(st): State<Arc<AppState>>, uri: Uri) -> Response {
    let Some(root) = &st.static_dir else {
        return ApiError::not_found("no such endpoint").into_response();
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    if rel.split('/').any(|seg| seg == ".." || seg.starts_with('.')) {
        return ApiError::not_found("no such file").into_response();
    }
    let path = root.join(rel);
    match std::fs::read(&path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type_for(&path))], bytes).into_response(),
        Err(_) => ApiError::not_found("no such file").into_response(),
    }
}
