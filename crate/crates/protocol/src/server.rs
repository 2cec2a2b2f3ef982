//! Reference inference servers: fixture replay and the rule-based detector.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flakescan_core::{AnnotationRecord, Detection};
use flakescan_vision::{detect_rule_based, RuleParams};
use serde_json::json;

use crate::error::{ProtocolError, ServerError};
use crate::wire::{
    decode_png, decode_request, encode_response, Health, InferRequest, InferResponse, ModelInfo, ModelList, MAX_SIDE,
    PROTOCOL_VERSION,
};

/// A detector behind `/v1/infer`.
pub trait Backend: Send + Sync + 'static {
    fn model_tag(&self) -> &str;

    /// Real time to wait before answering.
    fn delay(&self) -> Duration {
        Duration::ZERO
    }

    /// Returns the detections and the inference time to report, if the
    /// backend reports a simulated one instead of the measured one.
    fn infer(&self, req: &InferRequest) -> Result<(Vec<Detection>, Option<f64>), ProtocolError>;
}

/// Returns fixture annotations for known tile ids, score 1.0, and nothing for
/// unknown ones. The image is not looked at.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    fixture: HashMap<String, Vec<Detection>>,
    /// Injected real latency.
    pub sleep_ms: u64,
    /// Inference time reported in `timing_ms`.
    pub reported_ms: f64,
}

impl ReplayBackend {
    pub fn new(fixture: HashMap<String, Vec<Detection>>) -> Self {
        Self {
            fixture,
            ..Default::default()
        }
    }

    pub fn from_annotations(fixture: impl IntoIterator<Item = (String, Vec<AnnotationRecord>)>) -> Self {
        Self::new(
            fixture
                .into_iter()
                .map(|(tile, anns)| {
                    let dets = anns
                        .iter()
                        .map(|a| Detection {
                            score: 1.0,
                            ..a.to_detection()
                        })
                        .collect();
                    (tile, dets)
                })
                .collect(),
        )
    }

    pub fn with_latency(mut self, sleep_ms: u64, reported_ms: f64) -> Self {
        self.sleep_ms = sleep_ms;
        self.reported_ms = reported_ms;
        self
    }

    pub fn tiles(&self) -> usize {
        self.fixture.len()
    }
}

impl Backend for ReplayBackend {
    fn model_tag(&self) -> &str {
        "replay"
    }

    fn delay(&self) -> Duration {
        Duration::from_millis(self.sleep_ms)
    }

    fn infer(&self, req: &InferRequest) -> Result<(Vec<Detection>, Option<f64>), ProtocolError> {
        let dets = self.fixture.get(&req.tile_id).cloned().unwrap_or_default();
        Ok((dets, Some(self.reported_ms.max(self.sleep_ms as f64))))
    }
}

#[derive(Debug, Clone)]
pub struct RuleBackend {
    pub params: RuleParams,
}

impl Backend for RuleBackend {
    fn model_tag(&self) -> &str {
        "ruledet"
    }

    fn infer(&self, req: &InferRequest) -> Result<(Vec<Detection>, Option<f64>), ProtocolError> {
        let img = decode_png(&req.image_png)?;
        let dets = detect_rule_based(&img, &self.params).map_err(|e| ProtocolError::Invalid(e.to_string()))?;
        Ok((dets, None))
    }
}

/// Fault injection and request accounting shared with a running server.
#[derive(Debug, Default)]
pub struct ServerControl {
    fail_next: AtomicU32,
    outage: AtomicBool,
    failing_tiles: Mutex<HashSet<String>>,
    extra_delay_ms: AtomicU64,
    requests: AtomicU64,
}

impl ServerControl {
    /// Answer the next `n` inference requests with 503.
    pub fn fail_next(&self, n: u32) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn set_outage(&self, down: bool) {
        self.outage.store(down, Ordering::SeqCst);
    }

    /// Every request for `tile_id` gets 503.
    pub fn fail_tile(&self, tile_id: impl Into<String>) {
        self.failing_tiles.lock().expect("lock").insert(tile_id.into());
    }

    pub fn set_extra_delay_ms(&self, ms: u64) {
        self.extra_delay_ms.store(ms, Ordering::SeqCst);
    }

    /// Inference requests received, including failed ones.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    fn should_fail(&self, tile_id: &str) -> bool {
        if self.outage.load(Ordering::SeqCst) {
            return true;
        }
        if self
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return true;
        }
        self.failing_tiles.lock().expect("lock").contains(tile_id)
    }
}

struct AppState {
    backend: Arc<dyn Backend>,
    control: Arc<ServerControl>,
}

fn error_response(status: StatusCode, err: &str, message: String) -> Response {
    (status, Json(json!({ "error": err, "message": message }))).into_response()
}

async fn infer_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    state.control.requests.fetch_add(1, Ordering::SeqCst);
    let req = match decode_request(&body) {
        Ok(r) => r,
        Err(e) => {
            let kind = match e {
                ProtocolError::UnsupportedVersion(_) => "unsupported_version",
                _ => "protocol",
            };
            return error_response(StatusCode::BAD_REQUEST, kind, e.to_string());
        }
    };
    if req.model != state.backend.model_tag() {
        return error_response(
            StatusCode::BAD_REQUEST,
            "unknown_model",
            format!("model {:?} is not served here", req.model),
        );
    }
    if state.control.should_fail(&req.tile_id) {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "injected_fault", "injected fault".into());
    }
    let delay = state.backend.delay() + Duration::from_millis(state.control.extra_delay_ms.load(Ordering::SeqCst));
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    let backend = Arc::clone(&state.backend);
    let start = Instant::now();
    let result = tokio::task::spawn_blocking(move || backend.infer(&req)).await;
    let measured = start.elapsed().as_secs_f64() * 1000.0;
    match result {
        Ok(Ok((detections, reported))) => {
            let resp = InferResponse {
                version: PROTOCOL_VERSION.into(),
                model: state.backend.model_tag().into(),
                timing_ms: reported.unwrap_or(measured),
                detections,
            };
            ([("content-type", "application/json")], encode_response(&resp)).into_response()
        }
        Ok(Err(e)) => error_response(StatusCode::BAD_REQUEST, "protocol", e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

async fn health_handler(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: PROTOCOL_VERSION.into(),
        models: vec![state.backend.model_tag().into()],
    })
}

async fn models_handler(State(state): State<Arc<AppState>>) -> Json<ModelList> {
    Json(ModelList {
        version: PROTOCOL_VERSION.into(),
        models: vec![ModelInfo {
            tag: state.backend.model_tag().into(),
            max_side: MAX_SIDE,
            formats: vec!["png".into()],
        }],
    })
}

pub fn router(backend: Arc<dyn Backend>, control: Arc<ServerControl>) -> Router {
    Router::new()
        .route("/v1/infer", post(infer_handler))
        .route("/v1/health", get(health_handler))
        .route("/v1/models", get(models_handler))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(Arc::new(AppState { backend, control }))
}

/// A server running on its own thread. Dropping the handle stops it.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub control: Arc<ServerControl>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
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

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serve `app` on `addr` from a background thread. Binding happens before
/// returning, so a busy port is reported here.
pub fn spawn_router(addr: &str, app: Router) -> Result<(SocketAddr, tokio::sync::oneshot::Sender<()>, std::thread::JoinHandle<()>), ServerError> {
    let listener = std::net::TcpListener::bind(addr).map_err(|source| ServerError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|e| ServerError::Runtime(e.to_string()))?;
    let local = listener.local_addr().map_err(|e| ServerError::Runtime(e.to_string()))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| ServerError::Runtime(e.to_string()))?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener from std");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok((local, tx, thread))
}

pub fn spawn_server(addr: &str, backend: Arc<dyn Backend>) -> Result<ServerHandle, ServerError> {
    let control = Arc::new(ServerControl::default());
    let (addr, tx, thread) = spawn_router(addr, router(backend, Arc::clone(&control)))?;
    Ok(ServerHandle {
        addr,
        control,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Blocks until ctrl-c.
pub fn serve_forever(addr: &str, backend: Arc<dyn Backend>) -> Result<(), ServerError> {
    let handle = spawn_server(addr, backend)?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| ServerError::Runtime(e.to_string()))?;
    rt.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    handle.shutdown();
    Ok(())
}
