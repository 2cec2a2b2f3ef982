use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate polygon: {0} vertices, need at least 3")]
    DegeneratePolygon(usize),
    #[error("polygon has a non-finite vertex")]
    NonFiniteVertex,
    #[error("flat coordinate list has odd length {0}")]
    OddCoordinateCount(usize),
    #[error("mask dimensions must be at least 1x1, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("bit buffer has {actual} entries, expected {expected}")]
    BitLength { expected: usize, actual: usize },
    #[error("malformed rle: runs sum to {actual}, expected {expected}")]
    MalformedRle { expected: u64, actual: u64 },
    #[error("malformed rle: zero-length run after the first")]
    ZeroInteriorRun,
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("mask dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (u32, u32), b: (u32, u32) },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("unknown material {value:?}; allowed values: {allowed}")]
    UnknownMaterial { value: String, allowed: String },
    #[error("unknown thickness {value:?}; allowed values: {allowed}")]
    UnknownThickness { value: String, allowed: String },
    #[error("layer count must be at least 1")]
    ZeroLayers,
    #[error("{0} layers is outside the taxonomy (max 40)")]
    OutOfTaxonomy(u32),
    #[error("category name {0:?} is not of the form material_thickness")]
    BadCategoryName(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("invalid bounding box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("bounding box {bbox:?} disagrees with mask extent {mask:?}")]
    BoxMaskMismatch { bbox: [f64; 4], mask: [f64; 4] },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("iou threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("class index {index} out of range for {len} categories")]
    ClassIndex { index: usize, len: usize },
    #[error("probabilities must lie in [0, 1] and sum to 1 (sum = {0})")]
    BadDistribution(f64),
    #[error("mask grids differ: predicted {predicted} cells, target {target} cells, side {side}")]
    MaskShape { side: usize, predicted: usize, target: usize },
    #[error("target mask values must be 0 or 1")]
    NonBinaryTarget,
    #[error("loss weight {name} = {value} must be non-negative")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("loss component {name} = {value} must be non-negative and finite")]
    BadComponent { name: &'static str, value: f64 },
}
