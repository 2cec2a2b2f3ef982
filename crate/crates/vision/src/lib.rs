//! Synthetic microscope and the conventional rule-based detector.

pub mod error;
pub mod fixtures;
pub mod ruledet;
pub mod synthcam;

pub use error::VisionError;
pub use ruledet::{detect_rule_based, estimate_background, Connectivity, RuleParams};
pub use synthcam::{
    generate_chip, render_tile, tile_ground_truth, ChipScene, ChipSpec, IlluminationSetting, OpticsConfig, PlantedFlake, RenderedTile,
    StageLatency, StageState,
};
