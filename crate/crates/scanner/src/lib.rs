//! Scan orchestration for the virtual microscope: tile planning, the
//! capture → infer → record pipeline with simulated latency accounting,
//! coordinate transforms and deduplication of flakes seen by several tiles.

pub mod control;
pub mod error;
pub mod flake;
pub mod job;
pub mod plan;
pub mod run;

pub use control::{ControlError, ScanControl, ScanProgress, ScanStatus};
pub use error::ScanError;
pub use flake::{canonical_order, dedupe, dedupe_groups, flake_id, ObservedFlake, Offer, OnlineDeduper, DEFAULT_DEDUPE_IOU};
pub use job::{Histogram, ScanReport, StageTimes, ThresholdChange, TileJob, TileState};
pub use plan::{
    bbox_to_stage, pixel_to_stage, plan_tiles, polygon_to_stage, stage_to_pixel, PlannedTile, TilePlan, DEFAULT_OVERLAP,
};
pub use run::{
    replay_fixture, run_scan, LatencyModel, MemorySink, ResumePoint, ScanConfig, ScanSink, ScanStart, SyntheticSource,
    Thumbnail, TileCommit, TileSource,
};
