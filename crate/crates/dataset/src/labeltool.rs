//! Labeling-tool interchange for the semi-automatic annotation loop.
//!
//! Detector output is exported as editable label records, a human corrects
//! them in the labeling tool, and the corrected records are imported back as
//! annotations. A document is a JSON array of [`LabelRecord`].

use std::collections::BTreeMap;

use flakescan_core::{
    trace_outline, AnnotationRecord, Category, Detection, MaskGeometry, Material, Point, Polygon, Thickness,
};
use serde::{Deserialize, Serialize};

use crate::coco::{DatasetIndex, ImageEntry};
use crate::error::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Prediction,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    /// Annotation id; preserved across the export/import loop when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_height: Option<u32>,
    pub material: String,
    pub thickness: String,
    pub polygon: Vec<[f64; 2]>,
    pub source: LabelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub fn parse_labeltool(bytes: &[u8]) -> Result<Vec<LabelRecord>, DatasetError> {
    Ok(serde_json::from_slice(bytes)?)
}

pub fn serialize_labeltool(records: &[LabelRecord]) -> Result<Vec<u8>, DatasetError> {
    Ok(serde_json::to_vec_pretty(records)?)
}

/// Build a dataset index from label records.
///
/// Images are keyed by `image_ref` and numbered from 1 in sorted order.
/// Missing dimensions are recorded as 0. Records without an id get fresh ids
/// above the largest explicit one.
pub fn import_labeltool(records: &[LabelRecord]) -> Result<DatasetIndex, DatasetError> {
    let mut dims: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for r in records {
        let d = dims.entry(&r.image_ref).or_insert((0, 0));
        d.0 = d.0.max(r.image_width.unwrap_or(0));
        d.1 = d.1.max(r.image_height.unwrap_or(0));
    }
    let image_ids: BTreeMap<&str, u64> = dims.keys().enumerate().map(|(i, k)| (*k, i as u64 + 1)).collect();
    let images = dims
        .iter()
        .map(|(name, (w, h))| ImageEntry::new(image_ids[name], *name, *w, *h))
        .collect();

    let mut next_id = records.iter().filter_map(|r| r.id).max().map_or(1, |m| m + 1);
    let mut annotations = Vec::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        let material: Material = r.material.parse().map_err(|source| DatasetError::Label { index, source })?;
        let thickness: Thickness = r.thickness.parse().map_err(|source| DatasetError::Label { index, source })?;
        let polygon = Polygon::new(r.polygon.iter().map(|&p| Point::from(p)).collect());
        let id = r.id.unwrap_or_else(|| {
            next_id += 1;
            next_id - 1
        });
        let mut ann = AnnotationRecord::from_polygon(
            id,
            image_ids[r.image_ref.as_str()],
            Category::new(material, thickness),
            polygon,
        )
        .map_err(|source| DatasetError::LabelGeometry { index, source })?;
        ann.score = r.score;
        annotations.push(ann);
    }
    let idx = DatasetIndex {
        chip_id: None,
        images,
        annotations,
    };
    idx.validate()?;
    Ok(idx)
}

fn record_for(ann: &AnnotationRecord, image: &ImageEntry) -> LabelRecord {
    LabelRecord {
        id: Some(ann.id),
        image_ref: image.file_name.clone(),
        image_width: (image.width > 0).then_some(image.width),
        image_height: (image.height > 0).then_some(image.height),
        material: ann.category.material.to_string(),
        thickness: ann.category.thickness.to_string(),
        polygon: ann.polygon.vertices.iter().map(|&p| p.into()).collect(),
        source: if ann.score.is_some() {
            LabelSource::Prediction
        } else {
            LabelSource::Human
        },
        score: ann.score,
    }
}

/// Export every annotation of an index as a label record. Records carrying a
/// score are marked as predictions, the rest as human labels.
pub fn export_labeltool(idx: &DatasetIndex) -> Result<Vec<LabelRecord>, DatasetError> {
    idx.validate()?;
    let images: BTreeMap<u64, &ImageEntry> = idx.images.iter().map(|i| (i.id, i)).collect();
    Ok(idx.annotations.iter().map(|a| record_for(a, images[&a.image_id])).collect())
}

/// Export detector output for one image as editable prediction records.
/// RLE masks are converted to their traced outline polygon.
pub fn export_detections(
    image_ref: &str,
    width: u32,
    height: u32,
    detections: &[Detection],
    first_id: u64,
) -> Result<Vec<LabelRecord>, DatasetError> {
    detections
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let polygon = match &d.mask {
                MaskGeometry::Polygon { points } => points.clone(),
                MaskGeometry::Rle(rle) => {
                    let mask = flakescan_core::rle_decode(rle)
                        .map_err(|source| DatasetError::LabelGeometry { index: i, source })?;
                    trace_outline(&mask).map_err(|source| DatasetError::LabelGeometry { index: i, source })?
                }
            };
            Ok(LabelRecord {
                id: Some(first_id + i as u64),
                image_ref: image_ref.to_string(),
                image_width: Some(width),
                image_height: Some(height),
                material: d.category.material.to_string(),
                thickness: d.category.thickness.to_string(),
                polygon: polygon.vertices.iter().map(|&p| p.into()).collect(),
                source: LabelSource::Prediction,
                score: Some(d.score),
            })
        })
        .collect()
}
