use std::collections::HashSet;

use flakescan_core::{rasterize_polygon, AnnotationRecord, BBox, Category, Material, Point, Polygon, Thickness};
use flakescan_dataset::augment::{
    apply_gains, apply_ops, augment, coordinate_image, inverse_transform, AugmentConfig, GeomOp, Transform,
};
use flakescan_dataset::coco::round6;
use flakescan_dataset::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_polygon(rng: &mut impl Rng, w: f64, h: f64) -> Polygon {
    let cx = rng.random_range(8.0..w - 8.0);
    let cy = rng.random_range(8.0..h - 8.0);
    let n = rng.random_range(3..9);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    Polygon::new(
        angles
            .iter()
            .map(|a| {
                let r = rng.random_range(2.0..7.5);
                Point::new(cx + r * a.cos(), cy + r * a.sin())
            })
            .collect(),
    )
}

/// Vertices on a 1/8 px grid, so flips, turns and shifts are exact in floating point.
fn grid_polygon(rng: &mut impl Rng, w: f64, h: f64) -> Polygon {
    random_polygon(rng, w, h).map_points(|p| Point::new((p.x * 8.0).round() / 8.0, (p.y * 8.0).round() / 8.0))
}

fn synthetic_index(seed: u64, n_images: u64) -> DatasetIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = DatasetIndex {
        chip_id: Some(format!("chip-{seed}")),
        ..Default::default()
    };
    let mut ann_id = 1;
    for i in 1..=n_images {
        let material = Material::ALL[rng.random_range(0..4)];
        let mut img = ImageEntry::new(i, format!("img_{i:04}.png"), 96, 64).with_material(material);
        img.stage_origin_um = Some([rng.random_range(0.0..1e4), rng.random_range(0.0..1e4)]);
        img.um_per_px = Some(0.25);
        idx.images.push(img);
        for _ in 0..rng.random_range(0..5) {
            let cat = Category::new(material, Thickness::ALL[rng.random_range(0..3)]);
            let mut a = AnnotationRecord::from_polygon(ann_id, i, cat, random_polygon(&mut rng, 96.0, 64.0)).unwrap();
            if rng.random_bool(0.3) {
                a.score = Some(rng.random_range(0.0..1.0));
            }
            idx.annotations.push(a);
            ann_id += 1;
        }
    }
    idx
}

fn assert_close(a: &DatasetIndex, b: &DatasetIndex, tol: f64) {
    assert_eq!(a.images.len(), b.images.len());
    assert_eq!(a.annotations.len(), b.annotations.len());
    for (x, y) in a.annotations.iter().zip(&b.annotations) {
        assert_eq!((x.id, x.image_id, x.category), (y.id, y.image_id, y.category));
        assert_eq!(x.polygon.len(), y.polygon.len());
        for (p, q) in x.polygon.vertices.iter().zip(&y.polygon.vertices) {
            assert!((p.x - q.x).abs() <= tol && (p.y - q.y).abs() <= tol);
        }
        assert!(x.bbox.approx_eq(&y.bbox, 2.0 * tol));
    }
}

#[test]
fn coco_round_trip_fifty_images() {
    let idx1 = synthetic_index(50, 50);
    let idx2 = parse_coco(&serialize_coco(&idx1).unwrap()).unwrap();
    assert!(idx2.skipped.is_empty());
    let idx2 = idx2.index;
    let idx3 = parse_coco(&serialize_coco(&idx2).unwrap()).unwrap().index;
    // Once rounded to the serialized precision, the round trip is exact.
    assert_eq!(idx2, idx3);
    assert_close(&idx1, &idx2, 5e-7);
    assert_eq!(idx2.chip_id.as_deref(), Some("chip-50"));
    for (a, b) in idx1.images.iter().zip(&idx2.images) {
        assert_eq!((a.id, &a.file_name, a.material), (b.id, &b.file_name, b.material));
    }
}

#[test]
fn coco_vertices_are_rounded_to_six_places() {
    let idx = synthetic_index(3, 5);
    let back = parse_coco(&serialize_coco(&idx).unwrap()).unwrap().index;
    for (a, b) in idx.annotations.iter().zip(&back.annotations) {
        for (p, q) in a.polygon.vertices.iter().zip(&b.polygon.vertices) {
            assert_eq!(round6(p.x), q.x);
            assert_eq!(round6(p.y), q.y);
        }
    }
}

fn reference_corpus() -> DatasetIndex {
    let plan = [
        (Material::HBn, 353, 456),
        (Material::Graphene, 862, 4805),
        (Material::MoS2, 569, 839),
        (Material::WTe2, 318, 1053),
    ];
    let tri = Polygon::from_coords(&[(1.0, 1.0), (6.0, 1.0), (1.0, 6.0)]);
    let mut idx = DatasetIndex::default();
    let (mut img_id, mut ann_id) = (1u64, 1u64);
    for (m, n_img, n_ann) in plan {
        let first = img_id;
        for _ in 0..n_img {
            idx.images.push(ImageEntry::new(img_id, format!("{img_id}.png"), 32, 32).with_material(m));
            img_id += 1;
        }
        for k in 0..n_ann {
            let image = first + (k % n_img);
            let cat = Category::new(m, Thickness::ALL[(k % 3) as usize]);
            idx.annotations.push(AnnotationRecord::from_polygon(ann_id, image, cat, tri.clone()).unwrap());
            ann_id += 1;
        }
    }
    idx
}

#[test]
fn stats_match_published_counts() {
    let s = dataset_stats(&reference_corpus());
    let get = |m| s.per_material[&m];
    assert_eq!(get(Material::HBn), MaterialCount { images: 353, annotations: 456 });
    assert_eq!(get(Material::Graphene), MaterialCount { images: 862, annotations: 4805 });
    assert_eq!(get(Material::MoS2), MaterialCount { images: 569, annotations: 839 });
    assert_eq!(get(Material::WTe2), MaterialCount { images: 318, annotations: 1053 });
    assert_eq!(s.total, MaterialCount { images: 2102, annotations: 7153 });
}

#[test]
fn graphene_split_sizes() {
    let idx = reference_corpus();
    let graphene = DatasetIndex {
        chip_id: None,
        images: idx.images.iter().filter(|i| i.material == Some(Material::Graphene)).cloned().collect(),
        annotations: idx
            .annotations
            .iter()
            .filter(|a| a.category.material == Material::Graphene)
            .cloned()
            .collect(),
    };
    let s = split_dataset(&graphene, 0.8, 2021).unwrap();
    // 862 * 0.8 = 689.6, rounded half-up.
    assert_eq!(((862.0f64 * 0.8) + 0.5).floor() as usize, 690);
    assert_eq!((s.train.images.len(), s.test.images.len()), (690, 172));
    assert_eq!(s.train.annotations.len() + s.test.annotations.len(), 4805);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions(seed in any::<u64>(), n in 2u64..60, frac in 0.05f64..0.95) {
        let idx = synthetic_index(seed, n);
        let s = split_dataset(&idx, frac, seed).unwrap();
        let train: HashSet<u64> = s.train.images.iter().map(|i| i.id).collect();
        let test: HashSet<u64> = s.test.images.iter().map(|i| i.id).collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), n as usize);
        prop_assert_eq!(train.len(), train_size(n as usize, frac));
        prop_assert_eq!(s.train.annotations.len() + s.test.annotations.len(), idx.annotations.len());
        prop_assert!(s.train.annotations.iter().all(|a| train.contains(&a.image_id)));
        prop_assert!(s.test.annotations.iter().all(|a| test.contains(&a.image_id)));
        prop_assert_eq!(&s, &split_dataset(&idx, frac, seed).unwrap());
    }

    #[test]
    fn stats_sum_to_totals(seed in any::<u64>(), n in 0u64..40) {
        let idx = synthetic_index(seed, n);
        let s = dataset_stats(&idx);
        let imgs: usize = s.per_material.values().map(|c| c.images).sum();
        let anns: usize = s.per_material.values().map(|c| c.annotations).sum();
        prop_assert_eq!(imgs + s.untagged_images, s.total.images);
        prop_assert_eq!(anns, s.total.annotations);
    }

    #[test]
    fn labeltool_export_import_identity(seed in any::<u64>(), n in 1u64..20) {
        let mut idx = synthetic_index(seed, n);
        // Images without annotations do not appear in a label document.
        let used: HashSet<u64> = idx.annotations.iter().map(|a| a.image_id).collect();
        idx.images.retain(|i| used.contains(&i.id));
        let doc = export_labeltool(&idx).unwrap();
        let back = import_labeltool(&doc).unwrap();
        let doc2 = export_labeltool(&back).unwrap();
        prop_assert_eq!(&doc, &doc2);
        prop_assert_eq!(back.annotations.len(), idx.annotations.len());
        for (a, b) in idx.annotations.iter().zip(&back.annotations) {
            prop_assert_eq!(a.id, b.id);
            prop_assert_eq!(a.category, b.category);
            prop_assert_eq!(&a.polygon, &b.polygon);
            prop_assert_eq!(a.score, b.score);
        }
    }

    #[test]
    fn geometric_ops_preserve_area_and_agree_with_raster(
        seed in any::<u64>(),
        ops in prop::collection::vec(0u8..5, 1..4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (48u32, 40u32);
        let poly = grid_polygon(&mut rng, w as f64, h as f64);
        let ops: Vec<GeomOp> = ops
            .into_iter()
            .map(|k| match k {
                0 => GeomOp::HFlip,
                1 => GeomOp::VFlip,
                2 => GeomOp::Rotate { quarter_turns: 1 },
                3 => GeomOp::Rotate { quarter_turns: 3 },
                _ => GeomOp::Rotate { quarter_turns: 2 },
            })
            .collect();
        let mut mask = rasterize_polygon(&poly, w, h).unwrap();
        let mut p = poly.clone();
        let (mut cw, mut ch) = (w, h);
        for op in &ops {
            mask = op.apply_mask(&mask);
            p = op.apply_polygon(&p, cw, ch).unwrap();
            (cw, ch) = op.output_dims(cw, ch);
        }
        let direct = rasterize_polygon(&p, cw, ch).unwrap();
        prop_assert_eq!(mask.count(), rasterize_polygon(&poly, w, h).unwrap().count());
        prop_assert_eq!(mask, direct);
        prop_assert!((p.area() - poly.area()).abs() < 1e-9);
    }

    #[test]
    fn integer_shift_within_bounds_preserves_area(seed in any::<u64>(), dx in -6i32..=6, dy in -6i32..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poly = grid_polygon(&mut rng, 64.0, 64.0);
        let b = poly.bbox().unwrap();
        prop_assume!(b.x + dx as f64 >= 0.0 && b.right() + dx as f64 <= 64.0);
        prop_assume!(b.y + dy as f64 >= 0.0 && b.bottom() + dy as f64 <= 64.0);
        let op = GeomOp::Shift { dx, dy };
        let mask = rasterize_polygon(&poly, 64, 64).unwrap();
        let shifted = op.apply_mask(&mask);
        let p = op.apply_polygon(&poly, 64, 64).unwrap();
        prop_assert_eq!(shifted.count(), mask.count());
        prop_assert_eq!(rasterize_polygon(&p, 64, 64).unwrap(), shifted);
    }

    #[test]
    fn augment_is_deterministic(seed in any::<u64>()) {
        let img = coordinate_image(40, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cat = Category::new(Material::WTe2, Thickness::Few);
        let anns = vec![AnnotationRecord::from_polygon(1, 1, cat, random_polygon(&mut rng, 40.0, 24.0)).unwrap()];
        let cfg = AugmentConfig::default();
        let a = augment(&img, &anns, &cfg, seed).unwrap();
        let b = augment(&img, &anns, &cfg, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn hflip_moves_box_and_keeps_pixels() {
    let img = coordinate_image(50, 30);
    let cat = Category::new(Material::Graphene, Thickness::Few);
    let poly = Polygon::from_coords(&[(5.0, 4.0), (17.0, 4.0), (17.0, 11.0), (5.0, 11.0)]);
    let ann = AnnotationRecord::from_polygon(1, 1, cat, poly.clone()).unwrap();
    let (out, anns, dropped) = apply_ops(&img, &[ann], &[GeomOp::HFlip]);
    assert!(dropped.is_empty());
    assert_eq!(anns[0].bbox, BBox::new(50.0 - 5.0 - 12.0, 4.0, 12.0, 7.0));
    let before = rasterize_polygon(&poly, 50, 30).unwrap().count();
    assert_eq!(rasterize_polygon(&anns[0].polygon, 50, 30).unwrap().count(), before);
    assert_eq!(out.get_pixel(49, 0), img.get_pixel(0, 0));
}

#[test]
fn rotate_90_then_270_restores() {
    let img = coordinate_image(37, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cat = Category::new(Material::HBn, Thickness::Mono);
    let anns: Vec<_> = (1..=4)
        .map(|i| AnnotationRecord::from_polygon(i, 1, cat, random_polygon(&mut rng, 37.0, 21.0)).unwrap())
        .collect();
    let ops = [GeomOp::rotation_degrees(90).unwrap(), GeomOp::rotation_degrees(270).unwrap()];
    let (out, back, _) = apply_ops(&img, &anns, &ops);
    assert_eq!(out, img);
    for (a, b) in anns.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        for (p, q) in a.polygon.vertices.iter().zip(&b.polygon.vertices) {
            assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
        }
    }
}

#[test]
fn shift_out_of_frame_drops_annotation() {
    let img = coordinate_image(40, 40);
    let cat = Category::new(Material::MoS2, Thickness::Thick);
    let near_edge = Polygon::from_coords(&[(32.0, 5.0), (38.0, 5.0), (38.0, 12.0)]);
    let center = Polygon::from_coords(&[(10.0, 10.0), (20.0, 10.0), (20.0, 20.0)]);
    let anns = [
        AnnotationRecord::from_polygon(1, 1, cat, near_edge).unwrap(),
        AnnotationRecord::from_polygon(2, 1, cat, center).unwrap(),
    ];
    let (_, kept, dropped) = apply_ops(&img, &anns, &[GeomOp::Shift { dx: 9, dy: 0 }]);
    assert_eq!(dropped, vec![1]);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].bbox, BBox::new(19.0, 10.0, 10.0, 10.0));
}

#[test]
fn gains_leave_geometry_untouched() {
    let img = coordinate_image(20, 20);
    let cfg = AugmentConfig {
        gain_p: 1.0,
        hflip_p: 0.0,
        vflip_p: 0.0,
        rotate_p: 0.0,
        shift_p: 0.0,
        ..Default::default()
    };
    let cat = Category::new(Material::Graphene, Thickness::Mono);
    let anns = [AnnotationRecord::from_polygon(
        1,
        1,
        cat,
        Polygon::from_coords(&[(1.0, 1.0), (9.0, 1.0), (9.0, 9.0)]),
    )
    .unwrap()];
    let out = augment(&img, &anns, &cfg, 1).unwrap();
    let g = out.gains.unwrap();
    assert!(g.iter().all(|v| (0.8..1.2).contains(v)));
    assert_eq!(out.annotations, anns.to_vec());
    assert_eq!(out.image, apply_gains(&img, g));
}

#[test]
fn resize_round_trip_under_half_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let cat = Category::new(Material::Graphene, Thickness::Mono);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (w, h) = (rng.random_range(64..3000), rng.random_range(64..3000));
        let t = Transform::new(w, h, 1024).unwrap();
        let x = rng.random_range(0.0..w as f64 - 10.0);
        let y = rng.random_range(0.0..h as f64 - 10.0);
        let bw = rng.random_range(1.0..(w as f64 - x));
        let bh = rng.random_range(1.0..(h as f64 - y));
        let native = Polygon::from_coords(&[(x, y), (x + bw, y), (x + bw, y + bh), (x, y + bh)]);
        let fwd = Detection::from_polygon(cat, 0.5, native.map_points(|p| t.forward(p))).unwrap();
        let back = inverse_transform(&fwd, &t).unwrap();
        let orig = BBox::new(x, y, bw, bh);
        for (a, b) in [
            (orig.x, back.bbox.x),
            (orig.y, back.bbox.y),
            (orig.w, back.bbox.w),
            (orig.h, back.bbox.h),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 0.5, "max round-trip error {worst}");
}

#[test]
fn identity_transform_leaves_detection() {
    let t = Transform::new(1024, 1024, 1024).unwrap();
    let cat = Category::new(Material::WTe2, Thickness::Thick);
    let d = Detection::from_polygon(cat, 0.3, Polygon::from_coords(&[(3.0, 4.0), (30.0, 4.0), (30.0, 44.0)])).unwrap();
    assert_eq!(inverse_transform(&d, &t).unwrap(), d);
}

use flakescan_core::Detection;
