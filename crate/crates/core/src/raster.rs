//! Polygon ⇄ mask conversion.
//!
//! Rasterization samples pixel centers with the even-odd rule. A center lying
//! exactly on an edge is outside.

use std::collections::HashMap;

use crate::error::GeometryError;
use crate::geometry::{BitMask, Point, Polygon};

/// Rasterize `poly` onto a `width x height` grid.
pub fn rasterize_polygon(poly: &Polygon, width: u32, height: u32) -> Result<BitMask, GeometryError> {
    poly.validate()?;
    let mut mask = BitMask::new(width, height)?;
    let verts = &poly.vertices;
    let n = verts.len();
    let bbox = poly.bbox().expect("validated polygon has vertices");
    let row_lo = (bbox.y.floor().max(0.0) as i64).min(height as i64);
    let row_hi = ((bbox.bottom().ceil() as i64).min(height as i64)).max(row_lo);

    let mut crossings = Vec::with_capacity(n);
    for j in row_lo..row_hi {
        let yc = j as f64 + 0.5;
        crossings.clear();
        let mut touches_vertex_row = false;
        for k in 0..n {
            let a = verts[k];
            let b = verts[(k + 1) % n];
            if a.y == yc || b.y == yc {
                touches_vertex_row = true;
            }
            if (a.y > yc) != (b.y > yc) {
                crossings.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        if crossings.len() < 2 {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            let (x0, x1) = (pair[0], pair[1]);
            // pixel centers strictly inside (x0, x1)
            let first = ((x0 - 0.5).floor() + 1.0).max(0.0);
            let last = ((x1 - 0.5).ceil() - 1.0).min(width as f64 - 1.0);
            if last < first {
                continue;
            }
            for i in first as u32..=last as u32 {
                let xc = i as f64 + 0.5;
                if touches_vertex_row && on_boundary(verts, Point::new(xc, yc)) {
                    continue;
                }
                mask.set(i, j as u32, true);
            }
        }
    }
    Ok(mask)
}

/// Exact test for `p` lying on any polygon edge.
pub fn on_boundary(verts: &[Point], p: Point) -> bool {
    let n = verts.len();
    (0..n).any(|k| {
        let a = verts[k];
        let b = verts[(k + 1) % n];
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        cross == 0.0
            && p.x >= a.x.min(b.x)
            && p.x <= a.x.max(b.x)
            && p.y >= a.y.min(b.y)
            && p.y <= a.y.max(b.y)
    })
}

/// Trace the outer boundary of the largest 4-connected region of `mask` along
/// pixel edges.
///
/// The result is a rectilinear polygon whose rasterization reproduces the
/// region exactly when the region has no holes. Holes are filled.
pub fn trace_outline(mask: &BitMask) -> Result<Polygon, GeometryError> {
    if mask.is_empty() {
        return Err(GeometryError::EmptyMask);
    }
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let set = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as u32, y as u32);

    // Directed boundary edges with the region on the right (y down).
    let mut out: HashMap<(i64, i64), Vec<(i64, i64)>> = HashMap::new();
    for (x, y) in mask.iter_set() {
        let (x, y) = (x as i64, y as i64);
        if !set(x, y - 1) {
            out.entry((x, y)).or_default().push((x + 1, y));
        }
        if !set(x + 1, y) {
            out.entry((x + 1, y)).or_default().push((x + 1, y + 1));
        }
        if !set(x, y + 1) {
            out.entry((x + 1, y + 1)).or_default().push((x, y + 1));
        }
        if !set(x - 1, y) {
            out.entry((x, y + 1)).or_default().push((x, y));
        }
    }

    let mut starts: Vec<(i64, i64)> = out.keys().copied().collect();
    starts.sort_unstable_by_key(|&(x, y)| (y, x));

    let mut best: Option<(f64, Vec<(i64, i64)>)> = None;
    for start in starts {
        while let Some(first) = out.get_mut(&start).and_then(|v| v.pop()) {
            let mut ring = vec![start];
            let mut prev = start;
            let mut cur = first;
            while cur != start {
                ring.push(cur);
                let dir = (cur.0 - prev.0, cur.1 - prev.1);
                let next = {
                    let cands = out.get_mut(&cur).expect("boundary edges form closed loops");
                    // at pinch points keep circling the same pixel: right, straight, left
                    let prefs = [(-dir.1, dir.0), dir, (dir.1, -dir.0)];
                    let idx = prefs
                        .iter()
                        .find_map(|d| cands.iter().position(|&c| (c.0 - cur.0, c.1 - cur.1) == *d))
                        .unwrap_or(0);
                    cands.swap_remove(idx)
                };
                prev = cur;
                cur = next;
            }
            let poly = ring_to_polygon(&ring);
            let area = poly.signed_area();
            if area > 0.0 && best.as_ref().is_none_or(|(a, _)| area > *a) {
                best = Some((area, ring));
            }
        }
    }
    let (_, ring) = best.ok_or(GeometryError::EmptyMask)?;
    Ok(simplify_collinear(&ring_to_polygon(&ring)))
}

fn ring_to_polygon(ring: &[(i64, i64)]) -> Polygon {
    Polygon::new(ring.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect())
}

fn simplify_collinear(poly: &Polygon) -> Polygon {
    let v = &poly.vertices;
    let n = v.len();
    let kept: Vec<Point> = (0..n)
        .filter(|&i| {
            let a = v[(i + n - 1) % n];
            let b = v[i];
            let c = v[(i + 1) % n];
            (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x) != 0.0
        })
        .map(|i| v[i])
        .collect();
    Polygon::new(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    #[test]
    fn rectangle_covers_four_pixels() {
        let poly = Polygon::from_coords(&[(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)]);
        let m = rasterize_polygon(&poly, 4, 4).unwrap();
        let set: Vec<_> = m.iter_set().collect();
        assert_eq!(set, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn polygon_outside_grid_is_empty() {
        let poly = Polygon::from_coords(&[(10.0, 10.0), (12.0, 10.0), (12.0, 12.0)]);
        assert!(rasterize_polygon(&poly, 4, 4).unwrap().is_empty());
        let left = Polygon::from_coords(&[(-5.0, 0.0), (-1.0, 0.0), (-1.0, 3.0)]);
        assert!(rasterize_polygon(&left, 4, 4).unwrap().is_empty());
    }

    #[test]
    fn degenerate_polygon_errors() {
        let poly = Polygon::from_coords(&[(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(rasterize_polygon(&poly, 4, 4), Err(GeometryError::DegeneratePolygon(2)));
    }

    #[test]
    fn center_on_horizontal_edge_is_outside() {
        let poly = Polygon::from_coords(&[(0.0, 0.5), (2.0, 0.5), (2.0, 2.0), (0.0, 2.0)]);
        let m = rasterize_polygon(&poly, 3, 3).unwrap();
        assert!(!m.get(0, 0));
        assert!(m.get(0, 1) && m.get(1, 1));
        assert_eq!(m.count(), 2);
    }

    #[test]
    fn trace_single_pixel() {
        let mut m = BitMask::new(3, 3).unwrap();
        m.set(1, 1, true);
        let poly = trace_outline(&m).unwrap();
        assert_eq!(poly.len(), 4);
        assert_eq!(poly.area(), 1.0);
        assert_eq!(poly.bbox().unwrap(), BBox::new(1.0, 1.0, 1.0, 1.0));
        assert_eq!(rasterize_polygon(&poly, 3, 3).unwrap(), m);
    }

    #[test]
    fn trace_l_shape_reproduces_mask() {
        let mut m = BitMask::new(5, 5).unwrap();
        for &(x, y) in &[(1, 1), (1, 2), (1, 3), (2, 3), (3, 3)] {
            m.set(x, y, true);
        }
        let poly = trace_outline(&m).unwrap();
        assert_eq!(poly.len(), 6);
        assert_eq!(rasterize_polygon(&poly, 5, 5).unwrap(), m);
    }

    #[test]
    fn trace_picks_larger_of_diagonal_neighbours() {
        let mut m = BitMask::new(4, 4).unwrap();
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(2, 1, true);
        let poly = trace_outline(&m).unwrap();
        assert_eq!(poly.area(), 2.0);
    }

    #[test]
    fn trace_empty_mask_errors() {
        let m = BitMask::new(2, 2).unwrap();
        assert_eq!(trace_outline(&m), Err(GeometryError::EmptyMask));
    }
}
