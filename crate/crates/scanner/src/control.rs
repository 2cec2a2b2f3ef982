//! Commands a running scan accepts from outside: pause, resume, abort and
//! threshold changes, plus a live progress snapshot.

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::job::{ThresholdChange, TileState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanStatus {
    Running,
    Paused,
    Done,
    Failed,
}

impl ScanStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, ScanStatus::Done | ScanStatus::Failed)
    }

    /// Forward transitions, plus running ↔ paused.
    pub fn can_become(self, to: ScanStatus) -> bool {
        use ScanStatus::*;
        matches!(
            (self, to),
            (Running, Paused) | (Paused, Running) | (Running, Done) | (Running, Failed) | (Paused, Failed) | (Paused, Done)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanProgress {
    pub status: ScanStatus,
    pub tiles_total: usize,
    pub tiles_done: usize,
    pub tiles_failed: usize,
    pub flakes: usize,
    pub sim_clock_ms: f64,
    pub fps: Option<f64>,
    pub threshold: f64,
    /// Per-tile state in plan order, for the monitor grid.
    pub tile_states: Vec<TileState>,
}

#[derive(Debug)]
struct Inner {
    progress: ScanProgress,
    abort: bool,
    threshold_changes: Vec<ThresholdChange>,
    /// Tile index the next threshold change takes effect from.
    next_tile: usize,
}

/// Shared between the orchestrator and whoever steers the scan.
#[derive(Debug)]
pub struct ScanControl {
    inner: Mutex<Inner>,
    wake: Condvar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlError {
    Finished(ScanStatus),
    BadThreshold,
}

impl std::fmt::Display for ControlError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlError::Finished(s) => write!(f, "scan already finished ({s:?})"),
            ControlError::BadThreshold => write!(f, "threshold must lie in [0, 1]"),
        }
    }
}

impl std::error::Error for ControlError {}

impl ScanControl {
    pub fn new(tiles_total: usize, threshold: f64) -> Self {
        Self {
            inner: Mutex::new(Inner {
                progress: ScanProgress {
                    status: ScanStatus::Running,
                    tiles_total,
                    tiles_done: 0,
                    tiles_failed: 0,
                    flakes: 0,
                    sim_clock_ms: 0.0,
                    fps: None,
                    threshold,
                    tile_states: vec![TileState::Pending; tiles_total],
                },
                abort: false,
                threshold_changes: Vec::new(),
                next_tile: 0,
            }),
            wake: Condvar::new(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn progress(&self) -> ScanProgress {
        self.lock().progress.clone()
    }

    pub fn status(&self) -> ScanStatus {
        self.lock().progress.status
    }

    pub fn pause(&self) -> Result<ScanStatus, ControlError> {
        let mut g = self.lock();
        match g.progress.status {
            ScanStatus::Running | ScanStatus::Paused => {
                g.progress.status = ScanStatus::Paused;
                Ok(ScanStatus::Paused)
            }
            s => Err(ControlError::Finished(s)),
        }
    }

    pub fn resume(&self) -> Result<ScanStatus, ControlError> {
        let mut g = self.lock();
        match g.progress.status {
            ScanStatus::Running | ScanStatus::Paused => {
                g.progress.status = ScanStatus::Running;
                self.wake.notify_all();
                Ok(ScanStatus::Running)
            }
            s => Err(ControlError::Finished(s)),
        }
    }

    /// Stop after the tile in progress; recorded work is kept.
    pub fn abort(&self) -> Result<ScanStatus, ControlError> {
        let mut g = self.lock();
        if g.progress.status.is_finished() {
            return Err(ControlError::Finished(g.progress.status));
        }
        g.abort = true;
        self.wake.notify_all();
        Ok(g.progress.status)
    }

    /// Applies to tiles recorded after the call.
    pub fn set_threshold(&self, threshold: f64) -> Result<f64, ControlError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ControlError::BadThreshold);
        }
        let mut g = self.lock();
        if g.progress.status.is_finished() {
            return Err(ControlError::Finished(g.progress.status));
        }
        g.progress.threshold = threshold;
        let from_tile = g.next_tile;
        g.threshold_changes.retain(|c| c.from_tile != from_tile);
        g.threshold_changes.push(ThresholdChange { from_tile, threshold });
        Ok(threshold)
    }

    pub fn threshold_changes(&self) -> Vec<ThresholdChange> {
        self.lock().threshold_changes.clone()
    }

    pub fn is_aborted(&self) -> bool {
        self.lock().abort
    }

    /// Block while paused. Returns false when the scan should stop.
    pub fn checkpoint(&self) -> bool {
        let mut g = self.lock();
        while g.progress.status == ScanStatus::Paused && !g.abort {
            g = self.wake.wait(g).unwrap_or_else(|e| e.into_inner());
        }
        !g.abort
    }

    /// Threshold for recording `tile`; later changes apply from the next tile.
    pub(crate) fn threshold_for(&self, tile: usize) -> f64 {
        let mut g = self.lock();
        g.next_tile = tile + 1;
        g.progress.threshold
    }

    pub(crate) fn update(&self, f: impl FnOnce(&mut ScanProgress)) {
        f(&mut self.lock().progress);
    }

    pub(crate) fn finish(&self, status: ScanStatus) {
        let mut g = self.lock();
        g.progress.status = status;
        self.wake.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_transitions() {
        use ScanStatus::*;
        assert!(Running.can_become(Paused) && Paused.can_become(Running));
        assert!(!Done.can_become(Running));
        assert!(!Failed.can_become(Paused));
    }

    #[test]
    fn commands_after_finish_are_refused() {
        let c = ScanControl::new(4, 0.5);
        c.pause().unwrap();
        assert_eq!(c.status(), ScanStatus::Paused);
        c.resume().unwrap();
        c.finish(ScanStatus::Done);
        assert_eq!(c.pause(), Err(ControlError::Finished(ScanStatus::Done)));
        assert_eq!(c.set_threshold(0.7), Err(ControlError::Finished(ScanStatus::Done)));
    }

    #[test]
    fn threshold_change_is_recorded_against_next_tile() {
        let c = ScanControl::new(10, 0.5);
        assert_eq!(c.threshold_for(3), 0.5);
        c.set_threshold(0.8).unwrap();
        assert_eq!(c.threshold_changes(), vec![ThresholdChange { from_tile: 4, threshold: 0.8 }]);
        assert!(c.set_threshold(1.5).is_err());
    }
}
