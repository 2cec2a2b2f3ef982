#![allow(dead_code)]

use std::sync::Arc;

use flakescan_catalog::{ChipInfo, FlakeRecord, Store};
use flakescan_core::{BBox, Category, Detection, Material, Point, Polygon, Thickness};
use flakescan_protocol::{spawn_server, ClientConfig, InferenceClient, ReplayBackend, ServerHandle};
use flakescan_scanner::{plan_tiles, replay_fixture, ObservedFlake, SyntheticSource, TilePlan};
use flakescan_vision::{generate_chip, ChipScene, ChipSpec, OpticsConfig};

pub const CHIP: &str = "chip-a";

pub fn open_store() -> (tempfile::TempDir, Arc<Store>) {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    (dir, store)
}

pub fn chip(extent: f64) -> ChipInfo {
    ChipInfo {
        chip_id: CHIP.into(),
        extent_um: [extent, extent],
    }
}

pub fn square(x: f64, y: f64, s: f64) -> Polygon {
    Polygon::from_coords(&[(x, y), (x + s, y), (x + s, y + s), (x, y + s)])
}

/// A detection in tile `tile` whose origin is `origin` µm, at 1 µm/px on
/// 64 px tiles.
pub fn record_in(chip: &str, tile: &str, origin: Point, cat: Category, score: f64, poly: Polygon) -> FlakeRecord {
    let det = Detection::from_polygon(cat, score, poly).unwrap();
    let obs = ObservedFlake::from_detection(chip, tile, 0, origin, 1.0, [64, 64], &det).unwrap();
    FlakeRecord::from_observed(&obs, None, None)
}

pub fn record(x: f64, y: f64, m: Material, t: Thickness, score: f64) -> FlakeRecord {
    let origin = Point::new((x / 64.0).floor() * 64.0, (y / 64.0).floor() * 64.0);
    let tile = format!("t{}_{}", origin.x, origin.y);
    record_in(
        CHIP,
        &tile,
        origin,
        Category::new(m, t),
        score,
        square(x - origin.x, y - origin.y, 2.0),
    )
}

pub fn scene(extent: f64, count: usize, seed: u64) -> ChipScene {
    let spec = ChipSpec {
        chip_id: CHIP.into(),
        extent_um: [extent, extent],
        count: Some(count),
        ..Default::default()
    };
    generate_chip(&spec, seed).unwrap()
}

pub fn replay_server(scene: &ChipScene, sleep_ms: u64) -> (SyntheticSource, TilePlan, ServerHandle) {
    let optics = OpticsConfig::default();
    let plan = plan_tiles(BBox::new(0.0, 0.0, scene.extent_um[0], scene.extent_um[1]), optics.fov_um, 0.1).unwrap();
    let backend = ReplayBackend::from_annotations(replay_fixture(scene, &plan, &optics)).with_latency(sleep_ms, 200.0);
    let server = spawn_server("127.0.0.1:0", Arc::new(backend)).unwrap();
    (SyntheticSource::new(scene.clone(), optics), plan, server)
}

pub fn client(url: String) -> InferenceClient {
    let mut cfg = ClientConfig::new(url);
    cfg.backoff_ms = 5;
    InferenceClient::new(cfg).unwrap()
}

/// Records with timestamps cleared, for comparing catalogs.
pub fn snapshot(store: &Store) -> Vec<FlakeRecord> {
    store.all_flakes().iter().map(FlakeRecord::without_timestamps).collect()
}
