//! COCO-compatible dataset files.
//!
//! Categories are named `"{material}_{thickness}"`. Each annotation carries a
//! single polygon ring. Coordinates are written with 6 decimal places.

use std::collections::{BTreeMap, HashMap, HashSet};

use flakescan_core::{AnnotationRecord, BBox, Category, Material, Point, Polygon};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DatasetError, RecordError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<Material>,
    /// Stage position of the image's top-left corner, µm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_origin_um: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub um_per_px: Option<f64>,
}

impl ImageEntry {
    pub fn new(id: u64, file_name: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id,
            file_name: file_name.into(),
            width,
            height,
            material: None,
            stage_origin_um: None,
            um_per_px: None,
        }
    }

    pub fn with_material(mut self, m: Material) -> Self {
        self.material = Some(m);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetIndex {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chip_id: Option<String>,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationRecord>,
}

impl DatasetIndex {
    /// Check id uniqueness and that every annotation points at an image.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut image_ids = HashSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                return Err(DatasetError::DuplicateId { kind: "image", id: img.id });
            }
        }
        let mut ann_ids = HashSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(DatasetError::DuplicateId { kind: "annotation", id: a.id });
            }
            if !image_ids.contains(&a.image_id) {
                return Err(DatasetError::MissingImage {
                    annotation: a.id,
                    image: a.image_id,
                });
            }
        }
        Ok(())
    }

    /// Sort images and annotations by id so that equality is semantic.
    pub fn normalized(mut self) -> Self {
        self.images.sort_by_key(|i| i.id);
        self.annotations.sort_by_key(|a| a.id);
        self
    }

    pub fn image(&self, id: u64) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&AnnotationRecord>> {
        let mut map: BTreeMap<u64, Vec<&AnnotationRecord>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    pub fn next_annotation_id(&self) -> u64 {
        self.annotations.iter().map(|a| a.id).max().map_or(1, |m| m + 1)
    }

    pub fn next_image_id(&self) -> u64 {
        self.images.iter().map(|i| i.id).max().map_or(1, |m| m + 1)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<CocoInfo>,
    images: Vec<ImageEntry>,
    annotations: Vec<Value>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CocoInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chip_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
    #[serde(default)]
    supercategory: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    segmentation: Value,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

/// Result of parsing: the index plus any per-record problems that were skipped.
#[derive(Debug)]
pub struct ParsedCoco {
    pub index: DatasetIndex,
    pub skipped: Vec<RecordError>,
}

pub fn parse_coco(bytes: &[u8]) -> Result<ParsedCoco, DatasetError> {
    let file: CocoFile = serde_json::from_slice(bytes)?;
    let categories: HashMap<u32, Result<Category, String>> = file
        .categories
        .iter()
        .map(|c| (c.id, Category::from_name(&c.name).map_err(|e| e.to_string())))
        .collect();

    let mut skipped = Vec::new();
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for (index, raw) in file.annotations.into_iter().enumerate() {
        let id_hint = raw.get("id").and_then(Value::as_u64);
        let fail = |message: String| RecordError {
            index,
            annotation_id: id_hint,
            message,
        };
        let ann: CocoAnnotation = match serde_json::from_value(raw) {
            Ok(a) => a,
            Err(e) => {
                skipped.push(fail(e.to_string()));
                continue;
            }
        };
        let category = match categories.get(&ann.category_id) {
            Some(Ok(c)) => *c,
            Some(Err(e)) => {
                skipped.push(fail(e.clone()));
                continue;
            }
            None => {
                skipped.push(fail(format!("unknown category id {}", ann.category_id)));
                continue;
            }
        };
        let polygon = match single_ring(&ann.segmentation) {
            Ok(p) => p,
            Err(msg) => {
                skipped.push(fail(msg));
                continue;
            }
        };
        let bbox = ann
            .bbox
            .map(BBox::from)
            .unwrap_or_else(|| polygon.bbox().expect("validated ring"));
        let area = ann.area.unwrap_or_else(|| polygon.area());
        annotations.push(AnnotationRecord {
            id: ann.id,
            image_id: ann.image_id,
            category,
            polygon,
            bbox,
            area,
            score: ann.score,
        });
    }

    let index = DatasetIndex {
        chip_id: file.info.and_then(|i| i.chip_id),
        images: file.images,
        annotations,
    };
    index.validate()?;
    Ok(ParsedCoco { index, skipped })
}

fn single_ring(seg: &Value) -> Result<Polygon, String> {
    let rings: Vec<Vec<f64>> =
        serde_json::from_value(seg.clone()).map_err(|_| "segmentation is not a polygon list".to_string())?;
    if rings.len() != 1 {
        return Err(format!("expected exactly one polygon ring, found {}", rings.len()));
    }
    Polygon::from_flat(&rings[0]).map_err(|e| e.to_string())
}

pub fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

pub fn serialize_coco(idx: &DatasetIndex) -> Result<Vec<u8>, DatasetError> {
    idx.validate()?;
    let categories = Category::all()
        .map(|c| CocoCategory {
            id: c.coco_id(),
            name: c.name(),
            supercategory: c.material.to_string(),
        })
        .collect();
    let annotations = idx
        .annotations
        .iter()
        .map(|a| {
            let ring: Vec<f64> = a.polygon.to_flat().into_iter().map(round6).collect();
            serde_json::to_value(CocoAnnotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category.coco_id(),
                segmentation: serde_json::json!([ring]),
                bbox: Some([round6(a.bbox.x), round6(a.bbox.y), round6(a.bbox.w), round6(a.bbox.h)]),
                area: Some(round6(a.area)),
                iscrowd: 0,
                score: a.score.map(round6),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let images = idx
        .images
        .iter()
        .map(|i| ImageEntry {
            stage_origin_um: i.stage_origin_um.map(|[x, y]| [round6(x), round6(y)]),
            ..i.clone()
        })
        .collect();
    let file = CocoFile {
        info: Some(CocoInfo {
            description: Some("flakescan dataset".to_string()),
            chip_id: idx.chip_id.clone(),
        }),
        images,
        annotations,
        categories,
    };
    Ok(serde_json::to_vec_pretty(&file)?)
}

/// Rounded copy of a polygon, as it would come back from a COCO file.
pub fn rounded_polygon(p: &Polygon) -> Polygon {
    p.map_points(|q| Point::new(round6(q.x), round6(q.y)))
}
