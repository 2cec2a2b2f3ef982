//! COCO interchange and detection-performance reports against ground truth.

use std::collections::BTreeMap;

use flakescan_core::metrics::{per_image_confusion, precision_recall, ConfusionCounts, EvalImage, MatchCriteria, PrScores};
use flakescan_core::{AnnotationRecord, BBox, Detection, Material, MaskGeometry, Point};
use flakescan_dataset::{parse_coco, serialize_coco, DatasetIndex, ImageEntry};
use flakescan_scanner::{bbox_to_stage, flake_id, pixel_to_stage, stage_to_pixel};
use serde::{Deserialize, Serialize};

use crate::error::CatalogError;
use crate::query::{matching, FlakeQuery};
use crate::record::FlakeRecord;
use crate::store::Store;

fn tile_of(file_name: &str) -> &str {
    file_name.strip_suffix(".png").unwrap_or(file_name)
}

/// Export the records of `chip` that pass `filters` as a COCO file with one
/// image per source tile. Outlines stay in tile pixels; each image carries
/// its stage origin and scale.
pub fn export_coco(store: &Store, chip: &str, filters: &FlakeQuery) -> Result<Vec<u8>, CatalogError> {
    let q = FlakeQuery {
        chip: Some(chip.to_string()),
        limit: None,
        after: None,
        ..filters.clone()
    };
    let mut records = matching(store, &q);
    records.sort_by(|a, b| a.source_tile.cmp(&b.source_tile).then(a.id.cmp(&b.id)));

    let mut index = DatasetIndex {
        chip_id: Some(chip.to_string()),
        ..DatasetIndex::default()
    };
    let mut tiles: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &records {
        let next = tiles.len() as u64 + 1;
        let image_id = *tiles.entry(&r.source_tile).or_insert_with(|| {
            let [w, h] = r.tile_size_px;
            let mut img = ImageEntry::new(next, format!("{}.png", r.source_tile), w, h);
            img.stage_origin_um = Some([r.tile_origin_um.x, r.tile_origin_um.y]);
            img.um_per_px = Some(r.um_per_px);
            index.images.push(img);
            next
        });
        let mut ann = AnnotationRecord::from_polygon(index.annotations.len() as u64 + 1, image_id, r.category(), r.polygon_px.clone())
            .map_err(|e| CatalogError::Validation(format!("flake {}: {e}", r.id)))?;
        ann.score = Some(r.score);
        index.annotations.push(ann);
    }
    let materials: std::collections::BTreeSet<Material> = records.iter().map(|r| r.material).collect();
    if materials.len() == 1 {
        let m = *materials.iter().next().expect("one material");
        for img in &mut index.images {
            img.material = Some(m);
        }
    }
    Ok(serialize_coco(&index)?)
}

/// Rebuild catalog records from an exported COCO file. Every image needs a
/// stage origin and scale; ids are recomputed from chip, tile and outline.
pub fn import_coco(bytes: &[u8]) -> Result<Vec<FlakeRecord>, CatalogError> {
    let parsed = parse_coco(bytes)?;
    if let Some(first) = parsed.skipped.first() {
        return Err(CatalogError::Validation(format!(
            "{} annotations could not be read, first: {first}",
            parsed.skipped.len()
        )));
    }
    let index = parsed.index;
    let chip = index
        .chip_id
        .clone()
        .ok_or_else(|| CatalogError::Validation("COCO file has no chip id".into()))?;
    let mut out = Vec::with_capacity(index.annotations.len());
    for a in &index.annotations {
        let img = index.image(a.image_id).expect("validated by parse");
        let (Some([ox, oy]), Some(upp)) = (img.stage_origin_um, img.um_per_px) else {
            return Err(CatalogError::Validation(format!(
                "image {} lacks stage_origin_um or um_per_px",
                img.file_name
            )));
        };
        let origin = Point::new(ox, oy);
        let tile = tile_of(&img.file_name).to_string();
        let poly = a.polygon.clone();
        let centroid = poly
            .centroid()
            .ok_or_else(|| CatalogError::Validation(format!("annotation {} has a degenerate outline", a.id)))?;
        let bbox = poly.bbox().expect("validated polygon");
        let det = flakescan_scanner::ObservedFlake {
            id: flake_id(&chip, &tile, &poly),
            chip_id: chip.clone(),
            tile_id: tile,
            tile_index: 0,
            tile_origin_um: origin,
            um_per_px: upp,
            tile_size_px: [img.width, img.height],
            category: a.category,
            score: a.score.unwrap_or(1.0),
            bbox_um: bbox_to_stage(&bbox, origin, upp),
            centroid_um: pixel_to_stage(centroid, origin, upp),
            polygon_px: poly.clone(),
            mask: MaskGeometry::Polygon { points: poly },
        };
        out.push(FlakeRecord::from_observed(&det, None, None));
    }
    Ok(out)
}

/// Ground-truth images paired with the catalog's detections for `chip`.
/// Each record is projected into every ground-truth tile its box touches and
/// clipped to the tile. Rejected records are left out.
pub fn build_eval_images(store: &Store, chip: &str, gt: &DatasetIndex) -> Result<Vec<EvalImage>, CatalogError> {
    if let Some(g) = &gt.chip_id {
        if g != chip {
            return Err(CatalogError::ChipMismatch {
                catalog: chip.to_string(),
                ground_truth: g.clone(),
            });
        }
    }
    let records = matching(store, &FlakeQuery::chip(chip));
    let by_image = gt.annotations_by_image();
    let mut images = Vec::with_capacity(gt.images.len());
    for img in &gt.images {
        let (Some([ox, oy]), Some(upp)) = (img.stage_origin_um, img.um_per_px) else {
            return Err(CatalogError::Validation(format!(
                "ground-truth image {} lacks stage_origin_um or um_per_px",
                img.file_name
            )));
        };
        let origin = Point::new(ox, oy);
        let rect_um = BBox::new(ox, oy, img.width as f64 * upp, img.height as f64 * upp);
        let rect_px = BBox::new(0.0, 0.0, img.width as f64, img.height as f64);
        let mut dets = Vec::new();
        for r in &records {
            if r.bbox_um.intersection_area(&rect_um) <= 0.0 {
                continue;
            }
            let local = r
                .polygon_um()
                .map_points(|p| stage_to_pixel(p, origin, upp))
                .clip_to_rect(&rect_px);
            if local.len() < 3 || local.area() <= 0.0 {
                continue;
            }
            let d = Detection::from_polygon(r.category(), r.score, local)
                .map_err(|e| CatalogError::Validation(format!("flake {}: {e}", r.id)))?;
            dets.push(d);
        }
        images.push(EvalImage {
            width: img.width,
            height: img.height,
            gts: by_image
                .get(&img.id)
                .map(|v| v.iter().map(|a| (*a).clone()).collect())
                .unwrap_or_default(),
            dets,
        });
    }
    Ok(images)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub counts: ConfusionCounts,
    pub scores: PrScores,
}

impl ReportRow {
    pub fn from_images(images: &[EvalImage], criteria: &MatchCriteria) -> Result<Self, CatalogError> {
        let counts = per_image_confusion(images, criteria)?;
        Ok(Self {
            counts,
            scores: precision_recall(&counts),
        })
    }
}

/// Per-image confusion counts with precision and recall, overall and for
/// each material present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chip_id: String,
    pub images: usize,
    pub overall: ReportRow,
    pub by_material: BTreeMap<String, ReportRow>,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}%", v * 100.0));
        let mut s = format!(
            "chip {}: {} images\n{:<10} {:>6} {:>6} {:>6} {:>6} {:>10} {:>8}\n",
            self.chip_id, self.images, "", "TP", "FP", "FN", "TN", "precision", "recall"
        );
        let rows = std::iter::once(("all", &self.overall)).chain(self.by_material.iter().map(|(k, v)| (k.as_str(), v)));
        for (name, r) in rows {
            let c = r.counts;
            s.push_str(&format!(
                "{:<10} {:>6} {:>6} {:>6} {:>6} {:>10} {:>8}\n",
                name,
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                pct(r.scores.precision),
                pct(r.scores.recall)
            ));
        }
        s
    }
}

fn only_material(images: &[EvalImage], m: Material) -> Vec<EvalImage> {
    images
        .iter()
        .map(|img| EvalImage {
            width: img.width,
            height: img.height,
            gts: img.gts.iter().filter(|a| a.category.material == m).cloned().collect(),
            dets: img.dets.iter().filter(|d| d.category.material == m).cloned().collect(),
        })
        .collect()
}

pub fn report_metrics(
    store: &Store,
    chip: &str,
    gt: &DatasetIndex,
    criteria: &MatchCriteria,
) -> Result<MetricsReport, CatalogError> {
    let images = build_eval_images(store, chip, gt)?;
    let materials: std::collections::BTreeSet<Material> = images
        .iter()
        .flat_map(|i| {
            i.gts
                .iter()
                .map(|a| a.category.material)
                .chain(i.dets.iter().map(|d| d.category.material))
        })
        .collect();
    let mut by_material = BTreeMap::new();
    for m in materials {
        by_material.insert(m.to_string(), ReportRow::from_images(&only_material(&images, m), criteria)?);
    }
    Ok(MetricsReport {
        chip_id: chip.to_string(),
        images: images.len(),
        overall: ReportRow::from_images(&images, criteria)?,
        by_material,
    })
}
