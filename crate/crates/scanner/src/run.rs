//! The scan orchestrator: move → autofocus → capture → infer → lift to µm →
//! dedupe → record, with a bounded number of tiles in flight.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::time::Instant;

use flakescan_core::{AnnotationRecord, BBox, Detection, Point};
use flakescan_protocol::{encode_png, InferRequest, InferenceClient};
use flakescan_vision::{render_tile, tile_ground_truth, ChipScene, IlluminationSetting, OpticsConfig, StageLatency, StageState};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::control::{ScanControl, ScanStatus};
use crate::error::ScanError;
use crate::flake::{ObservedFlake, OnlineDeduper, Offer, DEFAULT_DEDUPE_IOU};
use crate::job::{Histogram, ScanReport, StageTimes, TileJob, TileState};
use crate::plan::{PlannedTile, TilePlan};

/// Where tiles come from.
pub trait TileSource: Sync {
    fn chip_id(&self) -> &str;
    fn chip_extent_um(&self) -> [f64; 2];
    fn optics(&self) -> &OpticsConfig;
    fn capture(&self, origin: Point) -> RgbImage;
}

#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub scene: ChipScene,
    pub optics: OpticsConfig,
    pub illumination: IlluminationSetting,
}

impl SyntheticSource {
    pub fn new(scene: ChipScene, optics: OpticsConfig) -> Self {
        Self {
            scene,
            optics,
            illumination: IlluminationSetting::default(),
        }
    }
}

impl TileSource for SyntheticSource {
    fn chip_id(&self) -> &str {
        &self.scene.chip_id
    }

    fn chip_extent_um(&self) -> [f64; 2] {
        self.scene.extent_um
    }

    fn optics(&self) -> &OpticsConfig {
        &self.optics
    }

    fn capture(&self, origin: Point) -> RgbImage {
        render_tile(&self.scene, origin, &self.optics, &self.illumination).image
    }
}

/// Ground truth of every planned tile, keyed by tile id, for a replay server.
pub fn replay_fixture(scene: &ChipScene, plan: &TilePlan, optics: &OpticsConfig) -> HashMap<String, Vec<AnnotationRecord>> {
    plan.tiles
        .iter()
        .map(|t| (t.id.clone(), tile_ground_truth(scene, t.position, optics)))
        .filter(|(_, gt)| !gt.is_empty())
        .collect()
}

/// Simulated per-stage costs. Inference time comes from the server's
/// reported `timing_ms`, plus `transfer_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub stage: StageLatency,
    pub autofocus_ms: f64,
    pub capture_ms: f64,
    pub transfer_ms: f64,
    pub record_ms: f64,
}

impl Default for LatencyModel {
    /// 250 ms move and focus, 150 ms capture, 200 ms transfer, 200 ms
    /// record and display; with 200 ms inference a tile costs 1 s.
    fn default() -> Self {
        Self {
            stage: StageLatency {
                fixed_ms: 150.0,
                ms_per_mm: 0.0,
            },
            autofocus_ms: 100.0,
            capture_ms: 150.0,
            transfer_ms: 200.0,
            record_ms: 200.0,
        }
    }
}

impl LatencyModel {
    pub fn zero() -> Self {
        Self {
            stage: StageLatency {
                fixed_ms: 0.0,
                ms_per_mm: 0.0,
            },
            autofocus_ms: 0.0,
            capture_ms: 0.0,
            transfer_ms: 0.0,
            record_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub scan_id: String,
    pub model: String,
    pub threshold: f64,
    pub dedupe_iou: f64,
    /// Tiles in flight between capture and record; 1 runs sequentially.
    pub pipeline_depth: usize,
    pub latency: LatencyModel,
    /// Detections within this distance of a tile side shared with another
    /// tile are dropped; the neighbour sees them whole.
    pub edge_margin_px: f64,
    pub thumbnail_margin_px: u32,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            scan_id: "scan".into(),
            model: "replay".into(),
            threshold: 0.5,
            dedupe_iou: DEFAULT_DEDUPE_IOU,
            pipeline_depth: 2,
            latency: LatencyModel::default(),
            edge_margin_px: 0.5,
            thumbnail_margin_px: 16,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<(), ScanError> {
        if self.scan_id.is_empty() || self.model.is_empty() {
            return Err(ScanError::Config("scan id and model must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ScanError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.dedupe_iou > 0.0 && self.dedupe_iou <= 1.0) {
            return Err(ScanError::Config(format!("dedupe IoU {} outside (0, 1]", self.dedupe_iou)));
        }
        if self.pipeline_depth == 0 {
            return Err(ScanError::Config("pipeline depth must be at least 1".into()));
        }
        let l = &self.latency;
        let all = [l.stage.fixed_ms, l.stage.ms_per_mm, l.autofocus_ms, l.capture_ms, l.transfer_ms, l.record_ms];
        if all.iter().any(|v| !(*v >= 0.0)) {
            return Err(ScanError::Config("latencies must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Thumbnail {
    pub flake_id: String,
    /// Top-left of the crop in tile px.
    pub origin_px: [u32; 2],
    pub png: Vec<u8>,
}

/// Everything persisted for one finished tile, written atomically.
#[derive(Debug, Clone, PartialEq)]
pub struct TileCommit {
    pub scan_id: String,
    pub chip_id: String,
    pub tile_index: usize,
    pub tile_id: String,
    pub state: TileState,
    pub error: Option<String>,
    pub added: Vec<ObservedFlake>,
    pub retracted: Vec<String>,
    pub thumbnails: Vec<Thumbnail>,
    pub times: StageTimes,
    /// Simulated clock when the tile was recorded.
    pub sim_clock_ms: f64,
}

/// State of a scan that was interrupted, recovered from the sink.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResumePoint {
    pub next_tile: usize,
    pub kept: Vec<ObservedFlake>,
    pub completed: usize,
    pub failed_tiles: Vec<String>,
    pub sim_clock_ms: f64,
    pub sequential_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanStart<'a> {
    pub scan_id: &'a str,
    pub chip_id: &'a str,
    pub chip_extent_um: [f64; 2],
    pub plan: &'a TilePlan,
    pub config: &'a ScanConfig,
}

/// Persistence for scan results, usually the catalog.
pub trait ScanSink {
    /// Register the scan; returns where to continue if it ran before.
    fn begin(&mut self, start: &ScanStart<'_>) -> Result<Option<ResumePoint>, String>;
    fn commit(&mut self, commit: &TileCommit) -> Result<(), String>;
    fn finish(&mut self, report: &ScanReport, status: ScanStatus) -> Result<(), String>;
}

/// In-memory sink, mainly for tests.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    pub commits: Vec<TileCommit>,
    pub flakes: BTreeMap<String, ObservedFlake>,
    pub report: Option<ScanReport>,
}

impl MemorySink {
    pub fn resume_point(&self) -> Option<ResumePoint> {
        let last = self.commits.last()?;
        let done = self.commits.iter().filter(|c| c.state == TileState::Recorded).count();
        Some(ResumePoint {
            next_tile: last.tile_index + 1,
            kept: self.flakes.values().cloned().collect(),
            completed: done,
            failed_tiles: self
                .commits
                .iter()
                .filter(|c| c.state == TileState::Failed)
                .map(|c| c.tile_id.clone())
                .collect(),
            sim_clock_ms: last.sim_clock_ms,
            sequential_ms: self.commits.iter().map(|c| c.times.total()).sum(),
        })
    }
}

impl ScanSink for MemorySink {
    fn begin(&mut self, _start: &ScanStart<'_>) -> Result<Option<ResumePoint>, String> {
        Ok(self.resume_point())
    }

    fn commit(&mut self, c: &TileCommit) -> Result<(), String> {
        for id in &c.retracted {
            self.flakes.remove(id);
        }
        for f in &c.added {
            self.flakes.insert(f.id.clone(), f.clone());
        }
        self.commits.push(c.clone());
        Ok(())
    }

    fn finish(&mut self, report: &ScanReport, _status: ScanStatus) -> Result<(), String> {
        self.report = Some(report.clone());
        Ok(())
    }
}

/// Simulated clock of the three-resource flow shop (stage+camera, detector,
/// recorder) with at most `depth` tiles between capture start and record end.
#[derive(Debug, Clone)]
struct SimClock {
    depth: usize,
    acquire_end: f64,
    infer_end: f64,
    record_ends: std::collections::VecDeque<f64>,
}

impl SimClock {
    fn new(depth: usize, start: f64) -> Self {
        Self {
            depth,
            acquire_end: start,
            infer_end: start,
            record_ends: std::collections::VecDeque::from(vec![start]),
        }
    }

    fn now(&self) -> f64 {
        *self.record_ends.back().expect("nonempty")
    }

    fn add(&mut self, t: &StageTimes) -> f64 {
        let slot_free = if self.record_ends.len() >= self.depth + 1 {
            self.record_ends[self.record_ends.len() - self.depth]
        } else {
            *self.record_ends.front().expect("nonempty")
        };
        let a_end = self.acquire_end.max(slot_free) + t.move_ms + t.capture_ms;
        let i_end = a_end.max(self.infer_end) + t.infer_ms;
        let r_end = i_end.max(self.now()) + t.record_ms;
        self.acquire_end = a_end;
        self.infer_end = i_end;
        self.record_ends.push_back(r_end);
        if self.record_ends.len() > self.depth + 1 {
            self.record_ends.pop_front();
        }
        r_end
    }
}

struct Captured {
    job: TileJob,
    tile: PlannedTile,
    image: RgbImage,
    png: Vec<u8>,
}

fn touches_shared_side(b: &BBox, sides: [bool; 4], w: f64, h: f64, margin: f64) -> bool {
    (sides[0] && b.x <= margin)
        || (sides[1] && b.y <= margin)
        || (sides[2] && b.right() >= w - margin)
        || (sides[3] && b.bottom() >= h - margin)
}

fn thumbnail(image: &RgbImage, b: &BBox, margin: u32) -> ([u32; 2], Vec<u8>) {
    let (w, h) = image.dimensions();
    let x0 = (b.x.floor().max(0.0) as u32).saturating_sub(margin);
    let y0 = (b.y.floor().max(0.0) as u32).saturating_sub(margin);
    let x1 = ((b.right().ceil().max(0.0) as u32) + margin).min(w).max(x0 + 1);
    let y1 = ((b.bottom().ceil().max(0.0) as u32) + margin).min(h).max(y0 + 1);
    let crop = image::imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image();
    ([x0, y0], encode_png(&crop))
}

/// Run `plan` over `source` against the detector behind `client`, recording
/// into `sink`. Per-tile failures are retried by the client and then marked
/// failed; the scan goes on. A sink failure stops the scan.
pub fn run_scan(
    source: &dyn TileSource,
    plan: &TilePlan,
    client: &InferenceClient,
    sink: &mut dyn ScanSink,
    control: &ScanControl,
    cfg: &ScanConfig,
) -> Result<ScanReport, ScanError> {
    cfg.validate()?;
    let real_start = Instant::now();
    let health = client
        .health()
        .map_err(|e| ScanError::DetectorUnavailable(e.to_string()))?;
    if health.status != "ok" || !health.models.iter().any(|m| m == &cfg.model) {
        return Err(ScanError::DetectorUnavailable(format!(
            "status {:?}, models {:?}, wanted {:?}",
            health.status, health.models, cfg.model
        )));
    }
    let optics = source.optics().clone();
    optics.validate().map_err(|e| ScanError::Config(e.to_string()))?;
    let chip_id = source.chip_id().to_string();
    let resume = sink
        .begin(&ScanStart {
            scan_id: &cfg.scan_id,
            chip_id: &chip_id,
            chip_extent_um: source.chip_extent_um(),
            plan,
            config: cfg,
        })
        .map_err(ScanError::Sink)?;
    let resumed_from = resume.as_ref().map(|r| r.next_tile);
    let resume = resume.unwrap_or_default();
    let upp = optics.um_per_px();
    let [w_px, h_px] = optics.sensor_px;

    let mut dedupe = OnlineDeduper::new(cfg.dedupe_iou, resume.kept.clone());
    let mut completed = resume.completed;
    let mut failed_tiles = resume.failed_tiles.clone();
    let mut sequential_ms = resume.sequential_ms;
    let mut clock = SimClock::new(cfg.pipeline_depth, resume.sim_clock_ms);
    let mut hist: BTreeMap<String, Histogram> = ["move", "capture", "infer", "record", "round_trip"]
        .iter()
        .map(|k| (k.to_string(), Histogram::default()))
        .collect();
    control.update(|p| {
        p.tiles_done = completed;
        p.tiles_failed = failed_tiles.len();
        p.flakes = dedupe.kept().len();
        p.sim_clock_ms = resume.sim_clock_ms;
        for s in p.tile_states.iter_mut().take(resume.next_tile) {
            *s = TileState::Recorded;
        }
        for t in &plan.tiles {
            if failed_tiles.contains(&t.id) {
                p.tile_states[t.index] = TileState::Failed;
            }
        }
    });

    let mut stage = StageState::new(plan.stage_limits(), cfg.latency.stage, cfg.latency.autofocus_ms);
    let mut sink_error = None;
    let aborted = std::thread::scope(|scope| {
        let (tokens_tx, tokens_rx) = mpsc::channel::<()>();
        for _ in 0..cfg.pipeline_depth {
            tokens_tx.send(()).expect("receiver alive");
        }
        let (cap_tx, cap_rx) = mpsc::channel::<Captured>();
        let (inf_tx, inf_rx) = mpsc::channel::<Captured>();

        // Acquisition owns the stage.
        let stage_ref = &mut stage;
        let cfg_ref = cfg;
        scope.spawn(move || {
            for tile in plan.tiles.iter().skip(resume.next_tile) {
                if tokens_rx.recv().is_err() || !control.checkpoint() {
                    break;
                }
                let mut job = TileJob::new(tile.index, tile.id.clone(), tile.position);
                let move_ms = stage_ref.stage_move(tile.position).unwrap_or(0.0) + stage_ref.stage_autofocus();
                let image = source.capture(tile.position);
                let png = encode_png(&image);
                job.times.move_ms = move_ms;
                job.times.capture_ms = cfg_ref.latency.capture_ms;
                job.advance(TileState::Captured).expect("fresh job");
                control.update(|p| p.tile_states[tile.index] = TileState::Captured);
                if cap_tx
                    .send(Captured {
                        job,
                        tile: tile.clone(),
                        image,
                        png,
                    })
                    .is_err()
                {
                    break;
                }
            }
        });

        let chip = chip_id.clone();
        scope.spawn(move || {
            for mut c in cap_rx {
                let req = InferRequest::new(&chip, &c.tile.id, &cfg.model, std::mem::take(&mut c.png));
                let start = Instant::now();
                match client.infer(&req) {
                    Ok(out) => {
                        c.job.times.infer_ms = cfg.latency.transfer_ms + out.response.timing_ms;
                        c.job.round_trip_ms = Some(out.round_trip_ms);
                        c.job.detections = out.response.detections;
                        c.job.advance(TileState::Inferred).expect("captured job");
                    }
                    Err(e) => {
                        c.job.times.infer_ms = start.elapsed().as_secs_f64() * 1000.0;
                        c.job.error = Some(e.to_string());
                        c.job.advance(TileState::Failed).expect("captured job");
                    }
                }
                control.update(|p| p.tile_states[c.tile.index] = c.job.state());
                if inf_tx.send(c).is_err() {
                    break;
                }
            }
        });

        // Recording, strictly in tile order, on this thread.
        for c in inf_rx {
            let Captured { mut job, tile, image, .. } = c;
            let threshold = control.threshold_for(tile.index);
            job.times.record_ms = cfg.latency.record_ms;
            let mut commit = TileCommit {
                scan_id: cfg.scan_id.clone(),
                chip_id: chip_id.clone(),
                tile_index: tile.index,
                tile_id: tile.id.clone(),
                state: TileState::Failed,
                error: job.error.clone(),
                added: Vec::new(),
                retracted: Vec::new(),
                thumbnails: Vec::new(),
                times: job.times,
                sim_clock_ms: 0.0,
            };
            if job.state() == TileState::Inferred {
                let sides = plan.interior_sides(&tile);
                let mut dets: Vec<&Detection> = job
                    .detections
                    .iter()
                    .filter(|d| d.score >= threshold)
                    .filter(|d| !touches_shared_side(&d.bbox, sides, w_px as f64, h_px as f64, cfg.edge_margin_px))
                    .collect();
                dets.sort_by(|a, b| flakescan_core::metrics::detection_order(a, b));
                for d in dets {
                    let Some(f) = ObservedFlake::from_detection(
                        &chip_id,
                        &tile.id,
                        tile.index,
                        tile.position,
                        upp,
                        [w_px, h_px],
                        d,
                    ) else {
                        log::warn!("tile {}: skipping detection with unusable mask", tile.id);
                        continue;
                    };
                    let id = f.id.clone();
                    let bbox_px = f.polygon_px.bbox().expect("validated");
                    match dedupe.offer(f.clone()) {
                        Offer::New => commit.added.push(f),
                        Offer::Replaces { old } => {
                            if let Some(pos) = commit.added.iter().position(|a| a.id == old) {
                                commit.added.remove(pos);
                                commit.thumbnails.retain(|t| t.flake_id != old);
                            } else {
                                commit.retracted.push(old);
                            }
                            commit.added.push(f);
                        }
                        Offer::Duplicate { .. } => continue,
                    }
                    let (origin_px, png) = thumbnail(&image, &bbox_px, cfg.thumbnail_margin_px);
                    commit.thumbnails.push(Thumbnail {
                        flake_id: id,
                        origin_px,
                        png,
                    });
                }
                job.advance(TileState::Recorded).expect("inferred job");
                commit.state = TileState::Recorded;
                completed += 1;
            } else {
                failed_tiles.push(tile.id.clone());
            }
            let now = clock.add(&job.times);
            commit.sim_clock_ms = now;
            sequential_ms += job.times.total();
            for (k, v) in [
                ("move", job.times.move_ms),
                ("capture", job.times.capture_ms),
                ("infer", job.times.infer_ms),
                ("record", job.times.record_ms),
            ] {
                hist.get_mut(k).expect("known stage").record(v);
            }
            if let Some(rt) = job.round_trip_ms {
                hist.get_mut("round_trip").expect("known stage").record(rt);
            }
            if let Err(e) = sink.commit(&commit) {
                sink_error = Some(e);
                let _ = control.abort();
                break;
            }
            let flakes = dedupe.kept().len();
            let failed = failed_tiles.len();
            control.update(|p| {
                p.tile_states[tile.index] = job.state();
                p.tiles_done = completed;
                p.tiles_failed = failed;
                p.flakes = flakes;
                p.sim_clock_ms = now;
                p.fps = (now > 0.0).then(|| completed as f64 / (now / 1000.0));
            });
            let _ = tokens_tx.send(());
        }
        drop(tokens_tx);
        control.is_aborted()
    });
    if let Some(e) = sink_error {
        control.finish(ScanStatus::Failed);
        return Err(ScanError::Sink(e));
    }

    let wall = clock.now();
    let report = ScanReport {
        scan_id: cfg.scan_id.clone(),
        chip_id,
        tiles_total: plan.len(),
        tiles_completed: completed,
        tiles_failed: failed_tiles.len(),
        failed_tiles,
        flakes_cataloged: dedupe.kept().len(),
        wall_clock_ms: wall,
        sequential_ms,
        fps: (wall > 0.0).then(|| completed as f64 / (wall / 1000.0)),
        pipeline_depth: cfg.pipeline_depth,
        real_elapsed_ms: real_start.elapsed().as_secs_f64() * 1000.0,
        latency: hist,
        threshold: control.progress().threshold,
        threshold_changes: control.threshold_changes(),
        aborted,
        resumed_from,
    };
    let status = if aborted { ScanStatus::Failed } else { ScanStatus::Done };
    sink.finish(&report, status).map_err(ScanError::Sink)?;
    control.finish(status);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn times(m: f64, c: f64, i: f64, r: f64) -> StageTimes {
        StageTimes {
            move_ms: m,
            capture_ms: c,
            infer_ms: i,
            record_ms: r,
        }
    }

    #[test]
    fn sequential_clock_sums_latencies() {
        let mut c = SimClock::new(1, 0.0);
        for _ in 0..10 {
            c.add(&times(250.0, 150.0, 400.0, 200.0));
        }
        assert!((c.now() - 10_000.0).abs() < 1e-9);
    }

    #[test]
    fn pipelined_clock_is_bounded() {
        let t = times(250.0, 150.0, 400.0, 200.0);
        let n = 50;
        let mut c = SimClock::new(2, 0.0);
        for _ in 0..n {
            c.add(&t);
        }
        let sequential = n as f64 * t.total();
        let bottleneck = n as f64 * 400.0;
        assert!(c.now() <= sequential && c.now() >= bottleneck, "{}", c.now());
        assert!(c.now() < sequential * 0.8);
    }

    #[test]
    fn edge_policy_only_applies_to_shared_sides() {
        let b = BBox::new(0.0, 10.0, 5.0, 5.0);
        assert!(touches_shared_side(&b, [true, true, true, true], 100.0, 100.0, 0.5));
        assert!(!touches_shared_side(&b, [false, true, true, true], 100.0, 100.0, 0.5));
        let c = BBox::new(10.0, 10.0, 89.6, 5.0);
        assert!(touches_shared_side(&c, [false, false, true, false], 100.0, 100.0, 0.5));
    }
}
