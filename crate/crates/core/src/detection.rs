use serde::{Deserialize, Serialize};

use crate::error::{DetectionError, GeometryError};
use crate::geometry::{bbox_from_mask, rle_decode, BBox, BitMask, Polygon, Rle};
use crate::raster::rasterize_polygon;
use crate::taxonomy::Category;

/// Instance mask as carried by a detection: a polygon in pixel coordinates or
/// an RLE over the full image grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MaskGeometry {
    Polygon { points: Polygon },
    Rle(Rle),
}

impl MaskGeometry {
    pub fn to_bitmask(&self, width: u32, height: u32) -> Result<BitMask, GeometryError> {
        match self {
            MaskGeometry::Polygon { points } => rasterize_polygon(points, width, height),
            MaskGeometry::Rle(rle) => {
                if (rle.width, rle.height) != (width, height) {
                    return Err(GeometryError::DimensionMismatch {
                        a: (rle.width, rle.height),
                        b: (width, height),
                    });
                }
                rle_decode(rle)
            }
        }
    }

    /// Extent of the mask: polygon vertex bounds, or whole-pixel bounds of the RLE.
    pub fn extent(&self) -> Result<BBox, GeometryError> {
        match self {
            MaskGeometry::Polygon { points } => {
                points.validate()?;
                Ok(points.bbox().expect("validated"))
            }
            MaskGeometry::Rle(rle) => bbox_from_mask(&rle_decode(rle)?),
        }
    }
}

/// One detected flake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: Category,
    pub score: f64,
    pub bbox: BBox,
    pub mask: MaskGeometry,
}

impl Detection {
    /// Checks score range, box validity and that the box matches the mask
    /// extent within one pixel.
    pub fn validate(&self) -> Result<(), DetectionError> {
        if !(0.0..=1.0).contains(&self.score) || self.score.is_nan() {
            return Err(DetectionError::ScoreOutOfRange(self.score));
        }
        if !self.bbox.is_valid() {
            return Err(DetectionError::InvalidBox(self.bbox.into()));
        }
        let extent = self.mask.extent()?;
        if !extent.approx_eq(&self.bbox, 1.0) {
            return Err(DetectionError::BoxMaskMismatch {
                bbox: self.bbox.into(),
                mask: extent.into(),
            });
        }
        Ok(())
    }

    pub fn from_polygon(category: Category, score: f64, polygon: Polygon) -> Result<Self, DetectionError> {
        polygon.validate()?;
        let bbox = polygon.bbox().expect("validated");
        let det = Detection {
            category,
            score,
            bbox,
            mask: MaskGeometry::Polygon { points: polygon },
        };
        det.validate()?;
        Ok(det)
    }
}

/// Ground-truth flake annotation in image pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category: Category,
    pub polygon: Polygon,
    pub bbox: BBox,
    pub area: f64,
    /// Confidence when the record originates from a detector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl AnnotationRecord {
    /// Build a record whose box and area are derived from the polygon.
    pub fn from_polygon(id: u64, image_id: u64, category: Category, polygon: Polygon) -> Result<Self, GeometryError> {
        polygon.validate()?;
        let bbox = polygon.bbox().expect("validated");
        let area = polygon.area();
        Ok(Self {
            id,
            image_id,
            category,
            polygon,
            bbox,
            area,
            score: None,
        })
    }

    /// The annotation viewed as a detection; score 1.0 unless one is recorded.
    pub fn to_detection(&self) -> Detection {
        Detection {
            category: self.category,
            score: self.score.unwrap_or(1.0),
            bbox: self.bbox,
            mask: MaskGeometry::Polygon {
                points: self.polygon.clone(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rle_encode;
    use crate::taxonomy::{Material, Thickness};

    fn cat() -> Category {
        Category::new(Material::Graphene, Thickness::Mono)
    }

    #[test]
    fn polygon_detection_validates() {
        let poly = Polygon::from_coords(&[(1.0, 1.0), (5.0, 1.0), (5.0, 4.0)]);
        let det = Detection::from_polygon(cat(), 0.9, poly).unwrap();
        assert_eq!(det.bbox, BBox::new(1.0, 1.0, 4.0, 3.0));
    }

    #[test]
    fn score_out_of_range() {
        let poly = Polygon::from_coords(&[(1.0, 1.0), (5.0, 1.0), (5.0, 4.0)]);
        assert!(matches!(
            Detection::from_polygon(cat(), 1.5, poly),
            Err(DetectionError::ScoreOutOfRange(_))
        ));
    }

    #[test]
    fn box_must_match_mask() {
        let mut m = BitMask::new(8, 8).unwrap();
        m.set(2, 2, true);
        m.set(3, 3, true);
        let mut det = Detection {
            category: cat(),
            score: 0.5,
            bbox: BBox::new(2.0, 2.0, 2.0, 2.0),
            mask: MaskGeometry::Rle(rle_encode(&m)),
        };
        det.validate().unwrap();
        det.bbox = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert!(matches!(det.validate(), Err(DetectionError::BoxMaskMismatch { .. })));
    }

    #[test]
    fn mask_geometry_wire_shape() {
        let m = MaskGeometry::Polygon {
            points: Polygon::from_coords(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]),
        };
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["type"], "polygon");
        assert_eq!(v["points"][1], serde_json::json!([1.0, 0.0]));
    }
}
