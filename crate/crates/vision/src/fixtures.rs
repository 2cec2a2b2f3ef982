//! The standard illumination-fragility scene: one few-layer graphene flake on
//! a small chip, and rule parameters calibrated on it at nominal intensity.

use flakescan_core::{Category, Material, Point, Polygon, Thickness};

use crate::ruledet::{estimate_background, RuleParams};
use crate::synthcam::{
    expected_contrast, render_tile, ChipScene, IlluminationSetting, OpticsConfig, PlantedFlake, NOMINAL_INTENSITY,
};

/// Lamp intensities of the published illumination series.
pub const ILLUMINATION_SERIES: [f64; 5] = [220.0, 210.0, 200.0, 180.0, 90.0];

pub const FLAKE_LAYERS: u32 = 6;
pub const WINDOW_HALF_WIDTH: f64 = 0.04;

#[derive(Debug, Clone)]
pub struct RuleFixture {
    pub scene: ChipScene,
    pub optics: OpticsConfig,
    pub origin: Point,
    pub params: RuleParams,
}

impl RuleFixture {
    pub fn illumination(intensity: f64) -> IlluminationSetting {
        IlluminationSetting::with_intensity(intensity)
    }
}

pub fn standard_rule_fixture() -> RuleFixture {
    let outline: Vec<Point> = (0..9)
        .map(|k| {
            let a = k as f64 * std::f64::consts::TAU / 9.0;
            let r = if k % 2 == 0 { 8.0 } else { 7.0 };
            Point::new(32.0 + r * a.cos(), 32.0 + r * a.sin())
        })
        .collect();
    let scene = ChipScene {
        chip_id: "fig2".into(),
        extent_um: [64.0, 64.0],
        flakes: vec![PlantedFlake {
            id: 1,
            polygon_um: Polygon::new(outline),
            material: Material::Graphene,
            layers: FLAKE_LAYERS,
        }],
        background: [200.0, 170.0, 210.0],
        seed: 2,
    };
    let optics = OpticsConfig {
        fov_um: [64.0, 64.0],
        sensor_px: [256, 256],
        ..OpticsConfig::default()
    };
    let origin = Point::new(0.0, 0.0);
    let nominal = render_tile(&scene, origin, &optics, &IlluminationSetting::with_intensity(NOMINAL_INTENSITY));
    let params = RuleParams::calibrated(
        estimate_background(&nominal.image),
        expected_contrast(Material::Graphene, FLAKE_LAYERS),
        WINDOW_HALF_WIDTH,
        200,
        20_000,
        Category::new(Material::Graphene, Thickness::Few),
    );
    RuleFixture {
        scene,
        optics,
        origin,
        params,
    }
}
