//! HTTP JSON API over the catalog and the scan manager.
//!
//! Errors are JSON bodies `{"error": kind, "message": text}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use flakescan_core::metrics::MatchCriteria;
use flakescan_core::{BBox, Polygon};
use flakescan_dataset::parse_coco;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CatalogError;
use crate::exchange::{export_coco, report_metrics};
use crate::manager::{ScanCommand, ScanManager, StartScanRequest};
use crate::query::{query, FlakeQuery, Page};
use crate::record::{FlakeRecord, ReviewRequest};
use crate::store::Store;

#[derive(Clone)]
struct AppState {
    store: Arc<Store>,
    scans: Arc<ScanManager>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request",
            message: message.into(),
        }
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        use CatalogError::*;
        let (status, kind) = match &e {
            NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ScanNotFound(_) => (StatusCode::NOT_FOUND, "scan_not_found"),
            NoGroundTruth(_) => (StatusCode::NOT_FOUND, "no_ground_truth"),
            UnknownChip(_) => (StatusCode::NOT_FOUND, "unknown_chip"),
            Validation(_) => (StatusCode::BAD_REQUEST, "validation"),
            Taxonomy(_) => (StatusCode::BAD_REQUEST, "taxonomy"),
            Dataset(_) => (StatusCode::BAD_REQUEST, "dataset"),
            ChipMismatch { .. } => (StatusCode::BAD_REQUEST, "chip_mismatch"),
            Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
            ScanState { .. } => (StatusCode::CONFLICT, "scan_state"),
            Scan(_) => (StatusCode::BAD_REQUEST, "scan"),
            Detector(_) => (StatusCode::BAD_GATEWAY, "detector_unavailable"),
            Metrics(_) => (StatusCode::INTERNAL_SERVER_ERROR, "metrics"),
            Io { .. } | Corrupt { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        Self {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Catalog calls block on disk and the detector; keep them off the reactor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, CatalogError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            message: e.to_string(),
        }),
    }
}

/// Outline and box in thumbnail pixels, for drawing over the thumbnail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub polygon: Polygon,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlakeView {
    #[serde(flatten)]
    pub record: FlakeRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay: Option<Overlay>,
}

impl From<FlakeRecord> for FlakeView {
    fn from(record: FlakeRecord) -> Self {
        let overlay = record.thumbnail.as_ref().and_then(|t| {
            let [ox, oy] = t.origin_px;
            let polygon = record
                .polygon_px
                .map_points(|p| flakescan_core::Point::new(p.x - ox as f64, p.y - oy as f64));
            let bbox = polygon.bbox()?;
            Some(Overlay { polygon, bbox })
        });
        Self { record, overlay }
    }
}

fn params(q: &[(String, String)]) -> impl Iterator<Item = (&str, &str)> {
    q.iter().map(|(k, v)| (k.as_str(), v.as_str()))
}

async fn list_flakes(
    State(st): State<AppState>,
    q: Result<Query<Vec<(String, String)>>, QueryRejection>,
) -> ApiResult<Json<Page<FlakeView>>> {
    let Query(q) = q?;
    let fq = FlakeQuery::from_params(params(&q))?;
    let page = query(&st.store, &fq)?;
    Ok(Json(Page {
        items: page.items.into_iter().map(FlakeView::from).collect(),
        total: page.total,
        next: page.next,
    }))
}

async fn get_flake(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<FlakeView>> {
    Ok(Json(st.store.get(&id)?.into()))
}

async fn review_flake(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ReviewRequest>, JsonRejection>,
) -> ApiResult<Json<FlakeView>> {
    let Json(req) = body?;
    let store = Arc::clone(&st.store);
    let r = blocking(move || store.review(&id, &req)).await?;
    Ok(Json(r.into()))
}

async fn flake_thumbnail(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let png = st.store.flake_thumbnail(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn list_chips(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "chips": st.store.chips() }))
}

async fn list_scans(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "scans": st.scans.scans() }))
}

async fn start_scan(
    State(st): State<AppState>,
    body: Result<Json<StartScanRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let scans = Arc::clone(&st.scans);
    let rec = blocking(move || scans.start(req)).await?;
    Ok((StatusCode::ACCEPTED, Json(rec)).into_response())
}

async fn get_scan(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(st.scans.scan(&id)?).into_response())
}

async fn scan_command(State(st): State<AppState>, Path((id, cmd)): Path<(String, String)>) -> ApiResult<Response> {
    let cmd: ScanCommand = cmd.parse()?;
    let status = st.scans.command(&id, cmd)?;
    Ok(Json(json!({"scan_id": id, "status": status})).into_response())
}

#[derive(Debug, Deserialize)]
struct ThresholdBody {
    threshold: f64,
}

async fn scan_threshold(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ThresholdBody>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(b) = body?;
    let t = st.scans.set_threshold(&id, b.threshold)?;
    Ok(Json(json!({"scan_id": id, "threshold": t})).into_response())
}

async fn chip_report(State(st): State<AppState>, Path(chip): Path<String>) -> ApiResult<Response> {
    let store = Arc::clone(&st.store);
    let report = blocking(move || {
        let gt = store.ground_truth(&chip)?;
        report_metrics(&store, &chip, &gt, &MatchCriteria::default())
    })
    .await?;
    Ok(Json(report).into_response())
}

async fn put_ground_truth(State(st): State<AppState>, Path(chip): Path<String>, body: Bytes) -> ApiResult<Response> {
    let store = Arc::clone(&st.store);
    let n = blocking(move || {
        let gt = parse_coco(&body)?.index;
        store.put_ground_truth(&chip, &gt)?;
        Ok(gt.images.len())
    })
    .await?;
    Ok(Json(json!({"images": n})).into_response())
}

async fn export_chip(
    State(st): State<AppState>,
    Path(chip): Path<String>,
    q: Result<Query<Vec<(String, String)>>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = q?;
    let fq = FlakeQuery::from_params(params(&q))?;
    let bytes = export_coco(&st.store, &chip, &fq)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        kind: "not_found",
        message: "no such endpoint".into(),
    }
}

/// The API routes; `ui_dir`, when given, is served for every other path.
pub fn api_router(store: Arc<Store>, scans: Arc<ScanManager>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/flakes", get(list_flakes))
        .route("/api/flakes/{id}", get(get_flake))
        .route("/api/flakes/{id}/review", post(review_flake))
        .route("/api/flakes/{id}/thumbnail", get(flake_thumbnail))
        .route("/api/chips", get(list_chips))
        .route("/api/scans", get(list_scans).post(start_scan))
        .route("/api/scans/{id}", get(get_scan))
        .route("/api/scans/{id}/threshold", axum::routing::patch(scan_threshold))
        .route("/api/scans/{id}/{command}", post(scan_command))
        .route("/api/reports/{chip}", get(chip_report))
        .route("/api/ground_truth/{chip}", put(put_ground_truth))
        .route("/api/export/{chip}", get(export_chip))
        .route("/api/{*rest}", axum::routing::any(not_found))
        .layer(axum::extract::DefaultBodyLimit::max(256 * 1024 * 1024))
        .with_state(AppState { store, scans });
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// A running API server; stops when dropped.
pub struct ApiHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ApiHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ApiHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Bind `addr` and serve the API from a background thread. A busy port is
/// reported here.
pub fn spawn_api(
    addr: &str,
    store: Arc<Store>,
    scans: Arc<ScanManager>,
    ui_dir: Option<PathBuf>,
) -> Result<ApiHandle, flakescan_protocol::ServerError> {
    let (addr, tx, thread) = flakescan_protocol::spawn_router(addr, api_router(store, scans, ui_dir))?;
    Ok(ApiHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
