//! Per-tile jobs, latency histograms and the scan report.

use std::collections::BTreeMap;

use flakescan_core::{Detection, Point};
use serde::{Deserialize, Serialize};

use crate::error::ScanError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileState {
    Pending,
    Captured,
    Inferred,
    Recorded,
    Failed,
}

impl TileState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TileState::Recorded | TileState::Failed)
    }
}

/// Simulated time spent in each stage, ms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    /// Stage move plus autofocus.
    pub move_ms: f64,
    pub capture_ms: f64,
    /// Image transfer plus server-side inference.
    pub infer_ms: f64,
    /// Catalog write plus display.
    pub record_ms: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.move_ms + self.capture_ms + self.infer_ms + self.record_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileJob {
    pub index: usize,
    pub tile_id: String,
    pub position: Point,
    state: TileState,
    pub times: StageTimes,
    pub detections: Vec<Detection>,
    /// Real round trip of the inference call, ms.
    pub round_trip_ms: Option<f64>,
    pub error: Option<String>,
}

impl TileJob {
    pub fn new(index: usize, tile_id: impl Into<String>, position: Point) -> Self {
        Self {
            index,
            tile_id: tile_id.into(),
            position,
            state: TileState::Pending,
            times: StageTimes::default(),
            detections: Vec::new(),
            round_trip_ms: None,
            error: None,
        }
    }

    pub fn state(&self) -> TileState {
        self.state
    }

    /// Move to `to`; states only go forward and nothing leaves a terminal state.
    pub fn advance(&mut self, to: TileState) -> Result<(), ScanError> {
        if to <= self.state || self.state.is_terminal() {
            return Err(ScanError::Transition {
                tile: self.tile_id.clone(),
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }
}

/// Fixed-bucket histogram of latencies in ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Upper bucket bounds; the final bucket is unbounded.
    pub bounds_ms: Vec<f64>,
    pub counts: Vec<u64>,
    pub count: u64,
    pub total_ms: f64,
    pub max_ms: f64,
}

impl Default for Histogram {
    fn default() -> Self {
        let bounds_ms = vec![
            1.0, 10.0, 50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 400.0, 500.0, 750.0, 1000.0, 2000.0, 5000.0,
        ];
        let counts = vec![0; bounds_ms.len() + 1];
        Self {
            bounds_ms,
            counts,
            count: 0,
            total_ms: 0.0,
            max_ms: 0.0,
        }
    }
}

impl Histogram {
    pub fn record(&mut self, ms: f64) {
        let i = self.bounds_ms.iter().position(|&b| ms <= b).unwrap_or(self.bounds_ms.len());
        self.counts[i] += 1;
        self.count += 1;
        self.total_ms += ms;
        self.max_ms = self.max_ms.max(ms);
    }

    pub fn mean_ms(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total_ms / self.count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChange {
    /// First tile recorded under the new threshold.
    pub from_tile: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub scan_id: String,
    pub chip_id: String,
    pub tiles_total: usize,
    pub tiles_completed: usize,
    pub tiles_failed: usize,
    pub failed_tiles: Vec<String>,
    pub flakes_cataloged: usize,
    /// Simulated wall-clock of the scan, ms.
    pub wall_clock_ms: f64,
    /// Sum of all simulated stage latencies.
    pub sequential_ms: f64,
    /// `tiles_completed / wall_clock`; absent when no simulated time passed.
    pub fps: Option<f64>,
    pub pipeline_depth: usize,
    /// Real time the orchestration took, ms.
    pub real_elapsed_ms: f64,
    pub latency: BTreeMap<String, Histogram>,
    pub threshold: f64,
    pub threshold_changes: Vec<ThresholdChange>,
    pub aborted: bool,
    pub resumed_from: Option<usize>,
}

impl ScanReport {
    pub fn summary(&self) -> String {
        let fps = self.fps.map(|f| format!("{f:.3}")).unwrap_or_else(|| "n/a".into());
        format!(
            "scan {} on {}: {}/{} tiles completed, {} failed, {} flakes cataloged\n\
             simulated wall-clock {:.1} s ({:.1} min), {} fps, pipeline depth {}, real time {:.1} s{}",
            self.scan_id,
            self.chip_id,
            self.tiles_completed,
            self.tiles_total,
            self.tiles_failed,
            self.flakes_cataloged,
            self.wall_clock_ms / 1000.0,
            self.wall_clock_ms / 60_000.0,
            fps,
            self.pipeline_depth,
            self.real_elapsed_ms / 1000.0,
            if self.aborted { ", aborted" } else { "" }
        )
    }
}
