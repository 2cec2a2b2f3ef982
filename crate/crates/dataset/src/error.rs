use flakescan_core::{GeometryError, TaxonomyError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("annotation {annotation} references missing image {image}")]
    MissingImage { annotation: u64, image: u64 },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("label record {index}: {source}")]
    Label {
        index: usize,
        #[source]
        source: TaxonomyError,
    },
    #[error("label record {index}: {source}")]
    LabelGeometry {
        index: usize,
        #[source]
        source: GeometryError,
    },
    #[error("need at least 2 images to split, got {0}")]
    TooFewImages(usize),
    #[error("train fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("training plan: {0}")]
    Plan(String),
}

/// A per-record problem found while parsing; the record is skipped and
/// parsing continues.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    /// Position of the record in the annotations array.
    pub index: usize,
    pub annotation_id: Option<u64>,
    pub message: String,
}

impl std::fmt::Display for RecordError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.annotation_id {
            Some(id) => write!(f, "annotation #{} (id {}): {}", self.index, id, self.message),
            None => write!(f, "annotation #{}: {}", self.index, self.message),
        }
    }
}
