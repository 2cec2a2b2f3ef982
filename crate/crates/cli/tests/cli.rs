use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use flakescan_core::{AnnotationRecord, BBox, Category, Material, Polygon, Thickness};
use flakescan_dataset::{serialize_coco, DatasetIndex, ImageEntry};
use flakescan_protocol::{encode_png, spawn_server, ReplayBackend};
use flakescan_scanner::{plan_tiles, replay_fixture};
use flakescan_vision::fixtures::{standard_rule_fixture, RuleFixture};
use flakescan_vision::{generate_chip, render_tile, ChipSpec, OpticsConfig};
use serde_json::Value;

fn flakescan(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_flakescan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "flakescan {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_index() -> DatasetIndex {
    let mut idx = DatasetIndex::default();
    let mut ann = 1;
    for i in 1..=10u64 {
        let m = if i % 2 == 0 { Material::Graphene } else { Material::WTe2 };
        idx.images.push(ImageEntry::new(i, format!("img{i}.png"), 64, 64).with_material(m));
        for k in 0..(i % 3 + 1) {
            let x = 4.0 + k as f64 * 20.0;
            let poly = Polygon::from_coords(&[(x, 4.0), (x + 12.0, 4.0), (x + 12.0, 16.0), (x, 16.0)]);
            let cat = Category::new(m, Thickness::Few);
            idx.annotations.push(AnnotationRecord::from_polygon(ann, i, cat, poly).unwrap());
            ann += 1;
        }
    }
    idx
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.json");
    std::fs::write(&gt, serialize_coco(&small_index()).unwrap()).unwrap();
    let report = dir.path().join("report.json");
    let out = flakescan(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--out", p(&report)]);
    let text = stdout(&out);
    assert!(text.contains("mAP = 1.000000"), "{text}");
    assert!(text.contains("TP 10  FP 0  FN 0  TN 0"), "{text}");
    let json: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["scores"]["precision"], 1.0);
    assert_eq!(json["ap"]["per_class"]["graphene"], 1.0);
}

#[test]
fn dataset_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let coco = dir.path().join("data.json");
    std::fs::write(&coco, serialize_coco(&small_index()).unwrap()).unwrap();

    let stats: Value = serde_json::from_str(&stdout(&flakescan(&["dataset", "stats", p(&coco), "--format", "json"]))).unwrap();
    assert_eq!(stats["total"]["images"], 10);
    assert_eq!(stats["total"]["annotations"], 20);
    assert_eq!(stats["per_material"]["graphene"]["images"], 5);

    let split = dir.path().join("split");
    let text = stdout(&flakescan(&["dataset", "split", p(&coco), "--fraction", "0.8", "--seed", "4", "--out-dir", p(&split)]));
    assert!(text.starts_with("train 8 images"), "{text}");
    let first = std::fs::read(split.join("train.json")).unwrap();
    flakescan(&["dataset", "split", p(&coco), "--fraction", "0.8", "--seed", "4", "--out-dir", p(&split)]);
    assert_eq!(first, std::fs::read(split.join("train.json")).unwrap());

    // COCO -> labeling tool -> COCO keeps every annotation
    let labels = dir.path().join("labels.json");
    flakescan(&["dataset", "convert", p(&coco), "-o", p(&labels), "--format", "labeltool"]);
    let back = dir.path().join("back.json");
    flakescan(&["dataset", "convert", p(&labels), "-o", p(&back), "--format", "coco"]);
    let parsed = flakescan_dataset::parse_coco(&std::fs::read(&back).unwrap()).unwrap().index;
    assert_eq!(parsed.annotations.len(), 20);

    let plan: Value = serde_json::from_str(&stdout(&flakescan(&["dataset", "plan"]))).unwrap();
    assert_eq!(plan["stages"].as_array().unwrap().len(), 4);
    assert_eq!(plan["iterations_per_epoch"], 500);
    assert_eq!(plan["stages"][1]["scope"], "layer4_up");
}

#[test]
fn loss_prints_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.json");
    let gt = dir.path().join("gt.json");
    std::fs::write(&pred, r#"[{"class_probs": [0.5, 0.5], "box": [0, 0, 0, 2], "mask": [0.5, 0.5, 0.5, 0.5]}]"#).unwrap();
    std::fs::write(&gt, r#"[{"class": 0, "box": [0, 0, 0, 0], "mask": [1, 0, 1, 0]}]"#).unwrap();
    let v: Value = serde_json::from_str(&stdout(&flakescan(&["loss", "--pred", p(&pred), "--gt", p(&gt)]))).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let m = &v["mean"];
    assert!((m["l_cls"].as_f64().unwrap() - ln2).abs() < 1e-12);
    assert!((m["l_box"].as_f64().unwrap() - 1.5).abs() < 1e-12);
    assert!((m["l_mask"].as_f64().unwrap() - ln2).abs() < 1e-12);
    assert!((m["l_total"].as_f64().unwrap() - (0.6 * ln2 + 1.5 + ln2)).abs() < 1e-12);
}

#[test]
fn rule_detection_and_augmentation_on_rendered_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let fx = standard_rule_fixture();
    let params = dir.path().join("params.json");
    std::fs::write(&params, serde_json::to_vec(&fx.params).unwrap()).unwrap();
    let mut paths = Vec::new();
    for i in [220.0, 180.0] {
        let tile = render_tile(&fx.scene, fx.origin, &fx.optics, &RuleFixture::illumination(i));
        let path = dir.path().join(format!("tile{i}.png"));
        std::fs::write(&path, encode_png(&tile.image)).unwrap();
        paths.push(path);
    }
    let v: Value = serde_json::from_str(&stdout(&flakescan(&[
        "detect-rule",
        "--params",
        p(&params),
        p(&paths[0]),
        p(&paths[1]),
    ])))
    .unwrap();
    assert_eq!(v[p(&paths[0])].as_array().unwrap().len(), 1);
    assert!(v[p(&paths[1])].as_array().unwrap().is_empty());

    let tile = render_tile(&fx.scene, fx.origin, &fx.optics, &RuleFixture::illumination(220.0));
    let mut idx = DatasetIndex::default();
    idx.images.push(ImageEntry::new(1, "tile220.png", 256, 256));
    idx.annotations.push(tile.ground_truth[0].clone());
    idx.annotations[0].image_id = 1;
    let coco = dir.path().join("in.json");
    std::fs::write(&coco, serialize_coco(&idx).unwrap()).unwrap();
    let out = dir.path().join("aug");
    let run = |out: &Path| {
        flakescan(&[
            "augment", "--coco", p(&coco), "--images", p(dir.path()), "--out", p(out), "--seed", "9", "--copies", "3",
        ])
    };
    run(&out);
    let parsed = flakescan_dataset::parse_coco(&std::fs::read(out.join("annotations.json")).unwrap()).unwrap().index;
    assert_eq!(parsed.images.len(), 3);
    // no shifts large enough to lose a centered flake
    assert_eq!(parsed.annotations.len(), 3);
    let again = dir.path().join("aug2");
    run(&again);
    for k in 0..3 {
        let name = format!("tile220_aug{k}.png");
        assert_eq!(std::fs::read(out.join(&name)).unwrap(), std::fs::read(again.join(&name)).unwrap());
    }
}

#[test]
fn scan_writes_catalog_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ChipSpec {
        chip_id: "cli-chip".into(),
        extent_um: [700.0, 700.0],
        count: Some(6),
        ..Default::default()
    };
    let chip = dir.path().join("chip.json");
    std::fs::write(&chip, serde_json::to_vec(&spec).unwrap()).unwrap();
    let scene = generate_chip(&spec, 3).unwrap();
    let optics = OpticsConfig::default();
    let plan = plan_tiles(BBox::new(0.0, 0.0, 700.0, 700.0), optics.fov_um, 0.1).unwrap();
    let backend = ReplayBackend::from_annotations(replay_fixture(&scene, &plan, &optics)).with_latency(0, 200.0);
    let server = spawn_server("127.0.0.1:0", Arc::new(backend)).unwrap();

    let catalog = dir.path().join("catalog");
    let out = flakescan(&[
        "scan", "--chip", p(&chip), "--seed", "3", "--detector", &server.url(), "--out", p(&catalog), "--scan-id", "s1",
        "--pipeline", "1",
    ]);
    let text = stdout(&out);
    assert!(text.contains("6 flakes cataloged"), "{text}");
    let report: Value = serde_json::from_slice(&std::fs::read(catalog.join("reports/s1.json")).unwrap()).unwrap();
    assert_eq!(report["tiles_total"], plan.len());
    assert_eq!(report["fps"], 1.0);
    let store = flakescan_catalog::Store::open(&catalog).unwrap();
    assert_eq!(store.len(), 6);
}

fn http_get(addr: &str, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(addr).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").ok()?;
    let mut body = String::new();
    s.read_to_string(&mut body).ok()?;
    Some(body)
}

#[test]
fn serve_catalog_answers_api_requests() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_flakescan"))
        .args(["serve", "catalog", "--catalog", p(dir.path()), "--addr", &addr])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut reply = None;
    while Instant::now() < deadline {
        if let Some(r) = http_get(&addr, "/api/chips") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let missing = http_get(&addr, "/api/flakes/nope");
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("server came up");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains(r#"{"chips":[]}"#), "{reply}");
    assert!(missing.unwrap().starts_with("HTTP/1.1 404"));
}
