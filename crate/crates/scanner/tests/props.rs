use flakescan_core::metrics::iou_box;
use flakescan_core::{BBox, Material, Point};
use flakescan_scanner::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn plan_covers_region(w in 50.0f64..3000.0, h in 50.0f64..3000.0, fov_frac in 0.05f64..1.0,
                          overlap in 0.0f64..=0.5, x in -500.0f64..500.0, y in -500.0f64..500.0) {
        let fov = w.min(h) * fov_frac;
        let region = BBox::new(x, y, w, h);
        let plan = plan_tiles(region, [fov, fov], overlap).unwrap();
        let step = fov * (1.0 - overlap);
        let [cols, rows] = plan.grid;
        prop_assert_eq!(cols, ((w - fov) / step - 1e-9).ceil().max(0.0) as usize + 1);
        prop_assert_eq!(plan.len(), cols * rows);
        // Sample a grid of points, including the far edges.
        for i in 0..=20 {
            for j in 0..=20 {
                let p = Point::new(x + w * i as f64 / 20.0, y + h * j as f64 / 20.0);
                let covered = plan.tiles.iter().any(|t| {
                    let r = plan.tile_rect(t);
                    p.x >= r.x - 1e-9 && p.x <= r.right() + 1e-9 && p.y >= r.y - 1e-9 && p.y <= r.bottom() + 1e-9
                });
                prop_assert!(covered, "{:?} uncovered", p);
            }
        }
        // Snake order: within a row one axis moves by one step; row turns move down.
        for pair in plan.tiles.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let dx = (b.position.x - a.position.x).abs();
            let dy = b.position.y - a.position.y;
            if a.row == b.row {
                prop_assert!((dx - step).abs() < 1e-9 && dy == 0.0);
            } else {
                prop_assert!(dx == 0.0 && (dy - step).abs() < 1e-9);
            }
        }
        let limits = plan.stage_limits();
        prop_assert!(plan.tiles.iter().all(|t| limits.contains_point(t.position)));
    }

    #[test]
    fn dedupe_matches_graph_components(
        boxes in prop::collection::vec((0usize..2, 0.0f64..60.0, 0.0f64..60.0, 2.0f64..15.0, 2.0f64..15.0), 0..30),
        thr in 0.1f64..0.9,
    ) {
        let mats = [Material::WTe2, Material::Graphene];
        let items: Vec<(Material, BBox)> = boxes.iter().map(|&(m, x, y, w, h)| (mats[m], BBox::new(x, y, w, h))).collect();
        let n = items.len();
        // Brute force: depth-first search over the full IoU graph.
        let adj = |i: usize, j: usize| items[i].0 == items[j].0 && iou_box(&items[i].1, &items[j].1) >= thr;
        let mut seen = vec![false; n];
        let mut components = 0;
        for s in 0..n {
            if seen[s] { continue; }
            components += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if !seen[j] && adj(i, j) {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        prop_assert_eq!(dedupe_groups(&items, thr).len(), components);
    }
}

#[test]
fn transforms_round_trip() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let origin = Point::new(rng.random_range(0.0..10_000.0), rng.random_range(0.0..10_000.0));
        let upp = rng.random_range(0.05..2.0);
        let um = Point::new(origin.x + rng.random_range(0.0..500.0), origin.y + rng.random_range(0.0..500.0));
        let back = pixel_to_stage(stage_to_pixel(um, origin, upp), origin, upp);
        worst = worst.max((back.x - um.x).abs()).max((back.y - um.y).abs());
    }
    assert!(worst < 1e-6, "{worst}");
}
