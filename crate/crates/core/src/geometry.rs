//! Pixel-space geometry: boxes, polygons, binary masks and their run-length form.
//!
//! Conventions used throughout the workspace:
//! - `x` grows to the right, `y` grows downward.
//! - Pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and is sampled at its center
//!   `(i + 0.5, j + 0.5)`.
//! - Masks are stored row-major.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned box, top-left corner plus extent. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x: x0.min(x1),
            y: y0.min(y1),
            w: (x1 - x0).abs(),
            h: (y1 - y0).abs(),
        }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    /// Overlap area with `other`; zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let h = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        w * h
    }

    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.x && p.x <= self.right() && p.y >= self.y && p.y <= self.bottom()
    }

    /// True when every edge of `self` is within `tol` of the matching edge of `other`.
    pub fn approx_eq(&self, other: &BBox, tol: f64) -> bool {
        (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
            && (self.right() - other.right()).abs() <= tol
            && (self.bottom() - other.bottom()).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Self { vertices }
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Self {
        Self::new(coords.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    /// Build from a COCO-style flat `[x0, y0, x1, y1, ...]` list.
    pub fn from_flat(flat: &[f64]) -> Result<Self, GeometryError> {
        if flat.len() % 2 != 0 {
            return Err(GeometryError::OddCoordinateCount(flat.len()));
        }
        let poly = Self::new(flat.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect());
        poly.validate()?;
        Ok(poly)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.vertices.len() < 3 {
            return Err(GeometryError::DegeneratePolygon(self.vertices.len()));
        }
        if self.vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFiniteVertex);
        }
        Ok(())
    }

    /// Shoelace signed area. Positive for clockwise winding on screen (y down).
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Vertex-extent box; `None` for an empty polygon.
    pub fn bbox(&self) -> Option<BBox> {
        let first = self.vertices.first()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for p in &self.vertices[1..] {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Some(BBox::from_corners(x0, y0, x1, y1))
    }

    /// Area-weighted centroid, falling back to the vertex mean for zero-area input.
    pub fn centroid(&self) -> Option<Point> {
        let n = self.vertices.len();
        if n == 0 {
            return None;
        }
        let a = self.signed_area();
        if a.abs() < 1e-12 {
            let sx: f64 = self.vertices.iter().map(|p| p.x).sum();
            let sy: f64 = self.vertices.iter().map(|p| p.y).sum();
            return Some(Point::new(sx / n as f64, sy / n as f64));
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let cross = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * cross;
            cy += (p.y + q.y) * cross;
        }
        Some(Point::new(cx / (6.0 * a), cy / (6.0 * a)))
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Polygon {
        Polygon::new(self.vertices.iter().copied().map(f).collect())
    }

    /// Sutherland–Hodgman clip against an axis-aligned rectangle.
    ///
    /// Exact for convex input; concave input may gain zero-width bridge edges,
    /// which do not change the even-odd rasterization.
    pub fn clip_to_rect(&self, rect: &BBox) -> Polygon {
        let x0 = rect.x;
        let x1 = rect.right();
        let y0 = rect.y;
        let y1 = rect.bottom();
        let mut pts = self.vertices.clone();
        let planes: [(&dyn Fn(Point) -> bool, &dyn Fn(Point, Point) -> Point); 4] = [
            (&|p| p.x >= x0, &|a, b| lerp_x(a, b, x0)),
            (&|p| p.x <= x1, &|a, b| lerp_x(a, b, x1)),
            (&|p| p.y >= y0, &|a, b| lerp_y(a, b, y0)),
            (&|p| p.y <= y1, &|a, b| lerp_y(a, b, y1)),
        ];
        for (inside, cut) in planes {
            if pts.is_empty() {
                break;
            }
            let input = std::mem::take(&mut pts);
            let n = input.len();
            for i in 0..n {
                let cur = input[i];
                let prev = input[(i + n - 1) % n];
                match (inside(prev), inside(cur)) {
                    (true, true) => pts.push(cur),
                    (true, false) => pts.push(cut(prev, cur)),
                    (false, true) => {
                        pts.push(cut(prev, cur));
                        pts.push(cur);
                    }
                    (false, false) => {}
                }
            }
        }
        Polygon::new(pts)
    }
}

fn lerp_x(a: Point, b: Point, x: f64) -> Point {
    let t = (x - a.x) / (b.x - a.x);
    Point::new(x, a.y + t * (b.y - a.y))
}

fn lerp_y(a: Point, b: Point, y: f64) -> Point {
    let t = (y - a.y) / (b.y - a.y);
    Point::new(a.x + t * (b.x - a.x), y)
}

/// Row-major binary occupancy grid.
#[derive(Clone, PartialEq, Eq)]
pub struct BitMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BitMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BitMask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl BitMask {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::ZeroDimension { width, height });
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        })
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::ZeroDimension { width, height });
        }
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(GeometryError::BitLength { expected, actual: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Iterate `(x, y)` of every set pixel in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i as u32) % w, (i as u32) / w))
    }
}

/// Row-major run-length encoding. `counts[0]` is the leading zero-run (may be 0),
/// runs then alternate ones/zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::ZeroDimension {
                width: self.width,
                height: self.height,
            });
        }
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expected = self.width as u64 * self.height as u64;
        if total != expected {
            return Err(GeometryError::MalformedRle { expected, actual: total });
        }
        if self.counts.iter().skip(1).any(|&c| c == 0) {
            return Err(GeometryError::ZeroInteriorRun);
        }
        Ok(())
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }
}

pub fn rle_encode(mask: &BitMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in &mask.bits {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    Rle {
        width: mask.width,
        height: mask.height,
        counts,
    }
}

pub fn rle_decode(rle: &Rle) -> Result<BitMask, GeometryError> {
    rle.validate()?;
    let mut bits = Vec::with_capacity(rle.width as usize * rle.height as usize);
    let mut value = false;
    for &c in &rle.counts {
        bits.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    BitMask::from_bits(rle.width, rle.height, bits)
}

/// Tightest box around the set pixels, in whole pixels.
pub fn bbox_from_mask(mask: &BitMask) -> Result<BBox, GeometryError> {
    let mut it = mask.iter_set();
    let (fx, fy) = it.next().ok_or(GeometryError::EmptyMask)?;
    let (mut x0, mut y0, mut x1, mut y1) = (fx, fy, fx, fy);
    for (x, y) in it {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Ok(BBox::new(
        x0 as f64,
        y0 as f64,
        (x1 - x0 + 1) as f64,
        (y1 - y0 + 1) as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from_rows(rows: &[&[u8]]) -> BitMask {
        let h = rows.len() as u32;
        let w = rows[0].len() as u32;
        let bits = rows.iter().flat_map(|r| r.iter().map(|&v| v != 0)).collect();
        BitMask::from_bits(w, h, bits).unwrap()
    }

    #[test]
    fn rle_of_all_zero_mask_is_single_run() {
        let m = BitMask::new(2, 2).unwrap();
        assert_eq!(rle_encode(&m).counts, vec![4]);
    }

    #[test]
    fn rle_of_diagonal_mask() {
        let m = mask_from_rows(&[&[1, 0], &[0, 1]]);
        let rle = rle_encode(&m);
        assert_eq!(rle.counts, vec![0, 1, 2, 1]);
        assert_eq!(rle_decode(&rle).unwrap(), m);
        assert_eq!(rle.area(), 2);
    }

    #[test]
    fn malformed_rle_is_rejected() {
        let rle = Rle {
            width: 2,
            height: 2,
            counts: vec![1, 1],
        };
        assert!(matches!(rle_decode(&rle), Err(GeometryError::MalformedRle { .. })));
        let zero_run = Rle {
            width: 2,
            height: 2,
            counts: vec![2, 0, 2],
        };
        assert!(matches!(rle_decode(&zero_run), Err(GeometryError::ZeroInteriorRun)));
    }

    #[test]
    fn bbox_examples() {
        let mut m = BitMask::new(8, 8).unwrap();
        m.set(3, 5, true);
        assert_eq!(bbox_from_mask(&m).unwrap(), BBox::new(3.0, 5.0, 1.0, 1.0));

        let full = BitMask::from_bits(4, 4, vec![true; 16]).unwrap();
        assert_eq!(bbox_from_mask(&full).unwrap(), BBox::new(0.0, 0.0, 4.0, 4.0));

        let mut two = BitMask::new(8, 8).unwrap();
        two.set(1, 1, true);
        two.set(2, 3, true);
        assert_eq!(bbox_from_mask(&two).unwrap(), BBox::new(1.0, 1.0, 2.0, 3.0));
    }

    #[test]
    fn bbox_of_empty_mask_errors() {
        let m = BitMask::new(3, 3).unwrap();
        assert_eq!(bbox_from_mask(&m), Err(GeometryError::EmptyMask));
    }

    #[test]
    fn zero_dimension_masks_are_rejected() {
        assert!(BitMask::new(0, 3).is_err());
        assert!(BitMask::from_bits(2, 2, vec![true; 3]).is_err());
    }

    #[test]
    fn polygon_area_and_centroid() {
        let sq = Polygon::from_coords(&[(0.0, 0.0), (4.0, 0.0), (4.0, 2.0), (0.0, 2.0)]);
        assert_eq!(sq.area(), 8.0);
        assert!(sq.signed_area() > 0.0);
        let c = sq.centroid().unwrap();
        assert!((c.x - 2.0).abs() < 1e-12 && (c.y - 1.0).abs() < 1e-12);
        assert_eq!(sq.bbox().unwrap(), BBox::new(0.0, 0.0, 4.0, 2.0));
    }

    #[test]
    fn clip_square_to_rect() {
        let sq = Polygon::from_coords(&[(-2.0, -2.0), (2.0, -2.0), (2.0, 2.0), (-2.0, 2.0)]);
        let clipped = sq.clip_to_rect(&BBox::new(0.0, 0.0, 10.0, 10.0));
        assert!((clipped.area() - 4.0).abs() < 1e-12);
        let gone = sq.clip_to_rect(&BBox::new(5.0, 5.0, 1.0, 1.0));
        assert!(gone.area() < 1e-12);
    }

    #[test]
    fn box_intersection() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert_eq!(a.intersection_area(&b), 1.0);
        assert_eq!(a.intersection_area(&BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn flat_polygon_requires_pairs() {
        assert!(Polygon::from_flat(&[0.0, 1.0, 2.0]).is_err());
        assert!(Polygon::from_flat(&[0.0, 0.0, 1.0, 0.0]).is_err());
        assert_eq!(Polygon::from_flat(&[0.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap().len(), 3);
    }
}
