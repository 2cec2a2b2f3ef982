//! Dataset toolchain: COCO files, labeling-tool interchange, splitting,
//! statistics, training plans and augmentation.

pub mod augment;
pub mod coco;
pub mod error;
pub mod labeltool;
pub mod plan;
pub mod split;
pub mod stats;

pub use coco::{parse_coco, serialize_coco, DatasetIndex, ImageEntry, ParsedCoco};
pub use error::{DatasetError, RecordError};
pub use labeltool::{export_detections, export_labeltool, import_labeltool, LabelRecord, LabelSource};
pub use plan::{emit_training_plan, PlanOverrides, SourceWeights, Stage, TrainableScope, TrainingPlan};
pub use split::{split_dataset, train_size, SplitResult};
pub use stats::{dataset_stats, DatasetStats, MaterialCount};
