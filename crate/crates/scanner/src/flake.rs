//! Detections lifted to chip coordinates, their identity, and deduplication
//! across overlapping tiles.

use std::cmp::Ordering;

use flakescan_core::metrics::iou_box;
use flakescan_core::{trace_outline, BBox, Category, Detection, MaskGeometry, Material, Point, Polygon};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::plan::{bbox_to_stage, polygon_to_stage};

pub const DEFAULT_DEDUPE_IOU: f64 = 0.3;

/// A detection placed on the chip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedFlake {
    pub id: String,
    pub chip_id: String,
    pub tile_id: String,
    pub tile_index: usize,
    pub tile_origin_um: Point,
    pub um_per_px: f64,
    pub tile_size_px: [u32; 2],
    pub category: Category,
    pub score: f64,
    pub bbox_um: BBox,
    pub centroid_um: Point,
    /// Outline in tile px; traced from the mask when the detector sent RLE.
    pub polygon_px: Polygon,
    /// Mask as the detector sent it.
    pub mask: MaskGeometry,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Stable identity of a flake seen in one tile: digest of chip, tile and the
/// outline quantized to 1e-6 px.
pub fn flake_id(chip_id: &str, tile_id: &str, polygon_px: &Polygon) -> String {
    let mut h = Sha256::new();
    h.update(chip_id.as_bytes());
    h.update([0]);
    h.update(tile_id.as_bytes());
    h.update([0]);
    for p in &polygon_px.vertices {
        h.update(format!("{:.6},{:.6};", round6(p.x) + 0.0, round6(p.y) + 0.0).as_bytes());
    }
    hex::encode(&h.finalize()[..10])
}

impl ObservedFlake {
    /// Lift a tile-pixel detection to chip µm.
    pub fn from_detection(
        chip_id: &str,
        tile_id: &str,
        tile_index: usize,
        tile_origin_um: Point,
        um_per_px: f64,
        tile_size_px: [u32; 2],
        det: &Detection,
    ) -> Option<Self> {
        let polygon_px = match &det.mask {
            MaskGeometry::Polygon { points } => points.clone(),
            MaskGeometry::Rle(rle) => trace_outline(&flakescan_core::rle_decode(rle).ok()?).ok()?,
        };
        polygon_px.validate().ok()?;
        let polygon_um = polygon_to_stage(&polygon_px, tile_origin_um, um_per_px);
        Some(Self {
            id: flake_id(chip_id, tile_id, &polygon_px),
            chip_id: chip_id.to_string(),
            tile_id: tile_id.to_string(),
            tile_index,
            tile_origin_um,
            um_per_px,
            tile_size_px,
            category: det.category,
            score: det.score,
            bbox_um: bbox_to_stage(&polygon_px.bbox()?, tile_origin_um, um_per_px),
            centroid_um: polygon_um.centroid()?,
            polygon_px,
            mask: det.mask.clone(),
        })
    }

    pub fn polygon_um(&self) -> Polygon {
        polygon_to_stage(&self.polygon_px, self.tile_origin_um, self.um_per_px)
    }

    pub fn material(&self) -> Material {
        self.category.material
    }
}

/// Canonical order: position (y, then x), then descending score, then id.
pub fn canonical_order(a: &ObservedFlake, b: &ObservedFlake) -> Ordering {
    a.centroid_um
        .y
        .total_cmp(&b.centroid_um.y)
        .then(a.centroid_um.x.total_cmp(&b.centroid_um.x))
        .then(b.score.total_cmp(&a.score))
        .then(a.id.cmp(&b.id))
}

/// Whether `new` should replace `kept` as the geometry of a merged flake.
fn preferred(new: &ObservedFlake, kept: &ObservedFlake) -> bool {
    match new.score.total_cmp(&kept.score) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => canonical_order(new, kept) == Ordering::Less,
    }
}

/// Groups of indices connected by same-material box IoU ≥ `iou`.
pub fn dedupe_groups(items: &[(Material, BBox)], iou: f64) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    // Sweep over x so that only boxes whose x-ranges overlap are compared.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| items[a].1.x.total_cmp(&items[b].1.x).then(a.cmp(&b)));
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if items[j].1.x > items[i].1.right() {
                break;
            }
            if items[i].0 == items[j].0 && iou_box(&items[i].1, &items[j].1) >= iou {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Merge observations of the same physical flake: same material and box IoU
/// ≥ `iou`, transitively. Each group keeps its highest-scoring geometry. The
/// result is in canonical order and independent of input order.
pub fn dedupe(flakes: &[ObservedFlake], iou: f64) -> Vec<ObservedFlake> {
    let items: Vec<(Material, BBox)> = flakes.iter().map(|f| (f.material(), f.bbox_um)).collect();
    let mut out: Vec<ObservedFlake> = dedupe_groups(&items, iou)
        .into_iter()
        .map(|g| {
            let mut best = &flakes[g[0]];
            for &i in &g[1..] {
                if preferred(&flakes[i], best) {
                    best = &flakes[i];
                }
            }
            best.clone()
        })
        .collect();
    out.sort_by(canonical_order);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Offer {
    New,
    /// Duplicate of a kept flake with at least its score.
    Duplicate { of: String },
    /// Better view of a kept flake, which it replaces.
    Replaces { old: String },
}

/// Incremental dedupe used while scanning: each new observation is compared
/// with the flakes kept so far. The state is exactly the kept set, so it can
/// be rebuilt from the catalog after a restart.
#[derive(Debug, Clone, Default)]
pub struct OnlineDeduper {
    kept: Vec<ObservedFlake>,
    iou: f64,
}

impl OnlineDeduper {
    pub fn new(iou: f64, kept: Vec<ObservedFlake>) -> Self {
        Self { kept, iou }
    }

    pub fn kept(&self) -> &[ObservedFlake] {
        &self.kept
    }

    pub fn offer(&mut self, flake: ObservedFlake) -> Offer {
        let best = self
            .kept
            .iter()
            .enumerate()
            .filter(|(_, k)| k.material() == flake.material())
            .map(|(i, k)| (i, iou_box(&k.bbox_um, &flake.bbox_um)))
            .filter(|&(_, v)| v >= self.iou)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            None => {
                self.kept.push(flake);
                Offer::New
            }
            Some((i, _)) if preferred(&flake, &self.kept[i]) => {
                let old = std::mem::replace(&mut self.kept[i], flake);
                Offer::Replaces { old: old.id }
            }
            Some((i, _)) => Offer::Duplicate {
                of: self.kept[i].id.clone(),
            },
        }
    }
}
