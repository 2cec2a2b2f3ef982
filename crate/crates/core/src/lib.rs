//! Shared primitives for the flake-scanning pipeline: pixel geometry,
//! the material/thickness taxonomy, detections, evaluation metrics and the
//! multitask training loss.

pub mod detection;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod taxonomy;

pub use detection::{AnnotationRecord, Detection, MaskGeometry};
pub use error::{DetectionError, GeometryError, LossError, MetricsError, TaxonomyError};
pub use geometry::{bbox_from_mask, rle_decode, rle_encode, BBox, BitMask, Point, Polygon, Rle};
pub use raster::{rasterize_polygon, trace_outline};
pub use taxonomy::{thickness_category, Category, Material, Thickness, ThicknessTaxonomy};
