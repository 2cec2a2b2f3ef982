//! Runs scans in background threads and routes control commands to them.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use flakescan_core::BBox;
use flakescan_protocol::{ClientConfig, InferenceClient};
use flakescan_scanner::{
    plan_tiles, run_scan, ControlError, ScanConfig, ScanControl, ScanReport, ScanStatus, SyntheticSource,
    DEFAULT_OVERLAP,
};
use flakescan_vision::{generate_chip, ChipSpec, IlluminationSetting, OpticsConfig};
use serde::{Deserialize, Serialize};

use crate::error::CatalogError;
use crate::record::ScanRecord;
use crate::store::{Store, StoreSink};

/// Body of `POST /api/scans`: scan a synthetic chip against a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartScanRequest {
    #[serde(default)]
    pub scan_id: Option<String>,
    #[serde(default)]
    pub chip: ChipSpec,
    #[serde(default)]
    pub seed: u64,
    /// Base URL of the inference server.
    pub detector: String,
    #[serde(default)]
    pub optics: OpticsConfig,
    #[serde(default)]
    pub illumination: IlluminationSetting,
    #[serde(default)]
    pub overlap: Option<f64>,
    /// Scan settings; its `scan_id` is ignored in favor of the field above.
    #[serde(default)]
    pub config: ScanConfig,
    #[serde(default)]
    pub client: Option<ClientSettings>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientSettings {
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanCommand {
    Pause,
    Resume,
    Abort,
}

impl std::str::FromStr for ScanCommand {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pause" => Ok(Self::Pause),
            "resume" => Ok(Self::Resume),
            "abort" => Ok(Self::Abort),
            _ => Err(CatalogError::Validation(format!("unknown scan command {s:?}"))),
        }
    }
}

struct Live {
    control: Arc<ScanControl>,
    handle: Option<JoinHandle<Result<ScanReport, String>>>,
}

pub struct ScanManager {
    store: Arc<Store>,
    live: Mutex<HashMap<String, Live>>,
    counter: AtomicU64,
}

impl std::fmt::Debug for ScanManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScanManager").field("store", &self.store.dir()).finish()
    }
}

fn control_error(scan_id: &str, e: ControlError) -> CatalogError {
    CatalogError::ScanState {
        scan_id: scan_id.to_string(),
        message: e.to_string(),
    }
}

impl ScanManager {
    pub fn new(store: Arc<Store>) -> Self {
        Self {
            store,
            live: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Live>> {
        self.live.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn fresh_id(&self) -> String {
        loop {
            let n = self.counter.fetch_add(1, Ordering::Relaxed);
            let id = format!("scan-{}-{n}", chrono::Utc::now().format("%Y%m%dT%H%M%S"));
            if self.store.scan(&id).is_err() {
                return id;
            }
        }
    }

    /// Start (or resume) a scan in the background. The scan is registered in
    /// the catalog before this returns.
    pub fn start(&self, req: StartScanRequest) -> Result<ScanRecord, CatalogError> {
        let scan_id = req.scan_id.clone().unwrap_or_else(|| self.fresh_id());
        let mut cfg = req.config.clone();
        cfg.scan_id = scan_id.clone();
        cfg.validate()?;
        req.optics
            .validate()
            .map_err(|e| CatalogError::Validation(e.to_string()))?;
        let scene = generate_chip(&req.chip, req.seed).map_err(|e| CatalogError::Validation(e.to_string()))?;
        let [w, h] = scene.extent_um;
        let plan = plan_tiles(BBox::new(0.0, 0.0, w, h), req.optics.fov_um, req.overlap.unwrap_or(DEFAULT_OVERLAP))?;

        let mut client_cfg = ClientConfig::new(req.detector.clone());
        if let Some(c) = req.client {
            client_cfg.timeout_ms = c.timeout_ms;
            client_cfg.retries = c.retries;
            client_cfg.backoff_ms = c.backoff_ms;
        }
        let client = InferenceClient::new(client_cfg).map_err(|e| CatalogError::Detector(e.to_string()))?;
        let health = client.health().map_err(|e| CatalogError::Detector(e.to_string()))?;
        if !health.models.iter().any(|m| m == &cfg.model) {
            return Err(CatalogError::Detector(format!(
                "{} serves {:?}, not {:?}",
                req.detector, health.models, cfg.model
            )));
        }

        let mut live = self.lock();
        if live.get(&scan_id).is_some_and(|l| !l.control.status().is_finished()) {
            return Err(CatalogError::ScanState {
                scan_id,
                message: "is already running".into(),
            });
        }
        let record = self.store.begin_scan(&flakescan_scanner::ScanStart {
            scan_id: &scan_id,
            chip_id: &scene.chip_id,
            chip_extent_um: scene.extent_um,
            plan: &plan,
            config: &cfg,
        })?;
        let control = Arc::new(ScanControl::new(plan.len(), cfg.threshold));
        let store = Arc::clone(&self.store);
        let ctl = Arc::clone(&control);
        let mut source = SyntheticSource::new(scene, req.optics.clone());
        source.illumination = req.illumination;
        let id = scan_id.clone();
        let handle = std::thread::Builder::new()
            .name(format!("scan {scan_id}"))
            .spawn(move || {
                let mut sink = StoreSink::new(Arc::clone(&store));
                let out = run_scan(&source, &plan, &client, &mut sink, &ctl, &cfg).map_err(|e| e.to_string());
                if let Err(e) = &out {
                    log::error!("scan {id} failed: {e}");
                    let _ = store.set_scan_status(&id, ScanStatus::Failed, None, Some(e.clone()));
                }
                out
            })
            .map_err(|e| CatalogError::io(self.store.dir(), e))?;
        live.insert(
            scan_id.clone(),
            Live {
                control,
                handle: Some(handle),
            },
        );
        Ok(record)
    }

    pub fn control(&self, scan_id: &str) -> Option<Arc<ScanControl>> {
        self.lock().get(scan_id).map(|l| Arc::clone(&l.control))
    }

    fn live_control(&self, scan_id: &str) -> Result<Arc<ScanControl>, CatalogError> {
        match self.control(scan_id) {
            Some(c) => Ok(c),
            None => {
                let rec = self.store.scan(scan_id)?;
                Err(CatalogError::ScanState {
                    scan_id: scan_id.to_string(),
                    message: format!("is not running in this service (status {:?})", rec.status),
                })
            }
        }
    }

    pub fn command(&self, scan_id: &str, cmd: ScanCommand) -> Result<ScanStatus, CatalogError> {
        let c = self.live_control(scan_id)?;
        let r = match cmd {
            ScanCommand::Pause => c.pause(),
            ScanCommand::Resume => c.resume(),
            ScanCommand::Abort => c.abort(),
        };
        r.map_err(|e| control_error(scan_id, e))
    }

    pub fn set_threshold(&self, scan_id: &str, threshold: f64) -> Result<f64, CatalogError> {
        let c = self.live_control(scan_id)?;
        c.set_threshold(threshold).map_err(|e| match e {
            ControlError::BadThreshold => CatalogError::Validation(e.to_string()),
            _ => control_error(scan_id, e),
        })
    }

    /// Stored record with the live progress of a scan run by this manager.
    pub fn scan(&self, scan_id: &str) -> Result<ScanRecord, CatalogError> {
        let mut rec = self.store.scan(scan_id)?;
        if let Some(c) = self.control(scan_id) {
            let p = c.progress();
            if !rec.status.is_finished() {
                rec.status = p.status;
            }
            rec.progress = Some(p);
        }
        Ok(rec)
    }

    pub fn scans(&self) -> Vec<ScanRecord> {
        self.store
            .scans()
            .into_iter()
            .map(|r| self.scan(&r.scan_id).unwrap_or(r))
            .collect()
    }

    /// Block until the scan's thread ends.
    pub fn wait(&self, scan_id: &str) -> Result<ScanReport, CatalogError> {
        let handle = self
            .lock()
            .get_mut(scan_id)
            .and_then(|l| l.handle.take())
            .ok_or_else(|| CatalogError::ScanNotFound(scan_id.to_string()))?;
        let out = handle.join().map_err(|_| CatalogError::ScanState {
            scan_id: scan_id.to_string(),
            message: "scan thread panicked".into(),
        })?;
        out.map_err(|message| CatalogError::ScanState {
            scan_id: scan_id.to_string(),
            message,
        })
    }
}
