use flakescan_core::TaxonomyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt log entry at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("no flake with id {0}")]
    NotFound(String),
    #[error("no scan with id {0}")]
    ScanNotFound(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("chip {0} is not registered")]
    UnknownChip(String),
    #[error("ground truth is for chip {ground_truth}, catalog query for {catalog}")]
    ChipMismatch { catalog: String, ground_truth: String },
    #[error("review conflict on {id}: expected {expected}, found {found}")]
    Conflict { id: String, expected: String, found: String },
    #[error("dataset: {0}")]
    Dataset(#[from] flakescan_dataset::DatasetError),
    #[error("metrics: {0}")]
    Metrics(#[from] flakescan_core::MetricsError),
    #[error("no ground truth stored for chip {0}")]
    NoGroundTruth(String),
    #[error("detector unavailable: {0}")]
    Detector(String),
    #[error("scan {scan_id}: {message}")]
    ScanState { scan_id: String, message: String },
    #[error("scan failed: {0}")]
    Scan(#[from] flakescan_scanner::ScanError),
}

impl CatalogError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CatalogError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
