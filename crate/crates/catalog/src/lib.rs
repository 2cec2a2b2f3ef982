//! Flake catalog: durable storage of scan results, filtered queries, the
//! review workflow, COCO interchange, metric reports against ground truth
//! and the HTTP API used by the review UI.

pub mod api;
pub mod error;
pub mod exchange;
pub mod manager;
pub mod query;
pub mod record;
pub mod store;

pub use api::{api_router, spawn_api, ApiHandle, FlakeView, Overlay};
pub use error::CatalogError;
pub use exchange::{build_eval_images, export_coco, import_coco, report_metrics, MetricsReport, ReportRow};
pub use manager::{ClientSettings, ScanCommand, ScanManager, StartScanRequest};
pub use query::{matching, query, FlakeQuery, Page, SortOrder, DEFAULT_LIMIT, MAX_LIMIT};
pub use record::{
    ChipInfo, FlakeRecord, PlanSummary, ReviewEvent, ReviewRequest, ReviewState, ReviewStatus, ScanCursor, ScanRecord,
    ThumbnailRef,
};
pub use store::{Store, StoreSink};
