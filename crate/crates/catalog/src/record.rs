//! Catalog rows: flakes with review state, chips and scans.

use flakescan_core::{BBox, Category, MaskGeometry, Material, Point, Polygon, Thickness};
use flakescan_scanner::{ObservedFlake, ScanConfig, ScanProgress, ScanReport, ScanStatus, TilePlan};
use serde::{Deserialize, Serialize};

use crate::error::CatalogError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Unreviewed,
    Accepted,
    Rejected,
    Relabeled,
}

impl std::str::FromStr for ReviewStatus {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unreviewed" => Ok(Self::Unreviewed),
            "accepted" => Ok(Self::Accepted),
            "rejected" => Ok(Self::Rejected),
            "relabeled" => Ok(Self::Relabeled),
            other => Err(CatalogError::Validation(format!("unknown review status {other:?}"))),
        }
    }
}

impl std::fmt::Display for ReviewStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Unreviewed => "unreviewed",
            Self::Accepted => "accepted",
            Self::Rejected => "rejected",
            Self::Relabeled => "relabeled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewState {
    pub status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_thickness: Option<Thickness>,
}

/// One state a record has been in. The first entry is the state at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewEvent {
    pub status: ReviewStatus,
    pub thickness: Thickness,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    pub at: String,
}

/// A review verdict as submitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub verdict: ReviewStatus,
    /// Required for `relabeled`, rejected otherwise.
    #[serde(default)]
    pub thickness: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub reviewer: Option<String>,
    /// If set, the review only applies when the record is in this state.
    #[serde(default)]
    pub expected_status: Option<ReviewStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThumbnailRef {
    pub sha256: String,
    /// Top-left of the crop in tile px.
    pub origin_px: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlakeRecord {
    pub id: String,
    pub chip_id: String,
    pub material: Material,
    /// Current thickness; differs from `detected_thickness` after a relabel.
    pub thickness: Thickness,
    pub detected_thickness: Thickness,
    pub score: f64,
    pub centroid_um: Point,
    pub bbox_um: BBox,
    /// Outline in source-tile px.
    pub polygon_px: Polygon,
    pub mask: MaskGeometry,
    pub source_tile: String,
    pub tile_origin_um: Point,
    pub um_per_px: f64,
    pub tile_size_px: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<ThumbnailRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_id: Option<String>,
    /// Not part of the record's identity.
    pub created_at: String,
    pub review: ReviewState,
    pub history: Vec<ReviewEvent>,
}

pub(crate) fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl FlakeRecord {
    pub fn from_observed(f: &ObservedFlake, scan_id: Option<&str>, thumbnail: Option<ThumbnailRef>) -> Self {
        let at = now();
        Self {
            id: f.id.clone(),
            chip_id: f.chip_id.clone(),
            material: f.category.material,
            thickness: f.category.thickness,
            detected_thickness: f.category.thickness,
            score: f.score,
            centroid_um: f.centroid_um,
            bbox_um: f.bbox_um,
            polygon_px: f.polygon_px.clone(),
            mask: f.mask.clone(),
            source_tile: f.tile_id.clone(),
            tile_origin_um: f.tile_origin_um,
            um_per_px: f.um_per_px,
            tile_size_px: f.tile_size_px,
            thumbnail,
            scan_id: scan_id.map(str::to_string),
            created_at: at.clone(),
            review: ReviewState {
                status: ReviewStatus::Unreviewed,
                note: None,
                corrected_thickness: None,
            },
            history: vec![ReviewEvent {
                status: ReviewStatus::Unreviewed,
                thickness: f.category.thickness,
                note: None,
                reviewer: None,
                at,
            }],
        }
    }

    /// The detector's view of the record, as the scanner's deduper sees it.
    pub fn to_observed(&self, tile_index: usize) -> ObservedFlake {
        ObservedFlake {
            id: self.id.clone(),
            chip_id: self.chip_id.clone(),
            tile_id: self.source_tile.clone(),
            tile_index,
            tile_origin_um: self.tile_origin_um,
            um_per_px: self.um_per_px,
            tile_size_px: self.tile_size_px,
            category: Category::new(self.material, self.detected_thickness),
            score: self.score,
            bbox_um: self.bbox_um,
            centroid_um: self.centroid_um,
            polygon_px: self.polygon_px.clone(),
            mask: self.mask.clone(),
        }
    }

    pub fn category(&self) -> Category {
        Category::new(self.material, self.thickness)
    }

    pub fn polygon_um(&self) -> Polygon {
        flakescan_scanner::polygon_to_stage(&self.polygon_px, self.tile_origin_um, self.um_per_px)
    }

    /// Copy with timestamps cleared, for comparing catalogs built at
    /// different times.
    pub fn without_timestamps(&self) -> Self {
        let mut r = self.clone();
        r.created_at.clear();
        for e in &mut r.history {
            e.at.clear();
        }
        r
    }

    pub fn validate(&self, chip: &ChipInfo) -> Result<(), CatalogError> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(CatalogError::Validation(format!("score {} outside [0, 1]", self.score)));
        }
        self.polygon_px
            .validate()
            .map_err(|e| CatalogError::Validation(format!("outline: {e}")))?;
        let [w, h] = chip.extent_um;
        let b = &self.bbox_um;
        let tol = 1e-6;
        if !b.is_valid() || b.x < -tol || b.y < -tol || b.right() > w + tol || b.bottom() > h + tol {
            return Err(CatalogError::Validation(format!(
                "flake {} box {:?} lies outside chip {} ({}×{} µm)",
                self.id, b, chip.chip_id, w, h
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipInfo {
    pub chip_id: String,
    pub extent_um: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub region: BBox,
    pub fov_um: [f64; 2],
    pub overlap: f64,
    pub grid: [usize; 2],
    pub tiles: usize,
}

impl From<&TilePlan> for PlanSummary {
    fn from(p: &TilePlan) -> Self {
        Self {
            region: p.region,
            fov_um: p.fov_um,
            overlap: p.overlap,
            grid: p.grid,
            tiles: p.len(),
        }
    }
}

/// Persisted progress of a scan, enough to resume it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScanCursor {
    pub next_tile: usize,
    pub completed: usize,
    pub failed_tiles: Vec<String>,
    pub sim_clock_ms: f64,
    pub sequential_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub chip_id: String,
    pub plan: PlanSummary,
    pub config: ScanConfig,
    pub status: ScanStatus,
    pub cursor: ScanCursor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ScanReport>,
    /// Live view while the scan runs in this process.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<ScanProgress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: String,
}
