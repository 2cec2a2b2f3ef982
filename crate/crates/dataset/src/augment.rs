//! On-line augmentation and model-input normalization.
//!
//! Geometric operations are exact pixel permutations: horizontal and vertical
//! flips, clockwise quarter turns and integer shifts. Polygons are mapped with
//! the continuous form of the same permutation, so rasterizing a transformed
//! polygon gives the transformed mask.

use flakescan_core::{
    trace_outline, AnnotationRecord, BBox, Detection, GeometryError, MaskGeometry, Point, Polygon,
};
use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("image has zero dimension ({0}x{1})")]
    ZeroDimension(u32, u32),
    #[error("target side must be positive")]
    ZeroTarget,
    #[error("rotation {0} is not a multiple of 90 degrees")]
    Rotation(i32),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("detection lies entirely in the padding")]
    PaddingArtifact,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Mapping from native image coordinates into the padded square model input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub scale: f64,
    pub pad_left: u32,
    pub pad_top: u32,
    pub original: (u32, u32),
    pub scaled: (u32, u32),
    pub target: u32,
}

impl Transform {
    pub fn new(width: u32, height: u32, target: u32) -> Result<Self, AugmentError> {
        if width == 0 || height == 0 {
            return Err(AugmentError::ZeroDimension(width, height));
        }
        if target == 0 {
            return Err(AugmentError::ZeroTarget);
        }
        let scale = target as f64 / width.max(height) as f64;
        let sw = ((width as f64 * scale).round() as u32).clamp(1, target);
        let sh = ((height as f64 * scale).round() as u32).clamp(1, target);
        Ok(Self {
            scale,
            pad_left: (target - sw) / 2,
            pad_top: (target - sh) / 2,
            original: (width, height),
            scaled: (sw, sh),
            target,
        })
    }

    pub fn forward(&self, p: Point) -> Point {
        Point::new(
            p.x * self.scale + self.pad_left as f64,
            p.y * self.scale + self.pad_top as f64,
        )
    }

    pub fn inverse(&self, p: Point) -> Point {
        Point::new(
            (p.x - self.pad_left as f64) / self.scale,
            (p.y - self.pad_top as f64) / self.scale,
        )
    }

    pub fn forward_box(&self, b: &BBox) -> BBox {
        let o = self.forward(Point::new(b.x, b.y));
        BBox::new(o.x, o.y, b.w * self.scale, b.h * self.scale)
    }

    pub fn inverse_box(&self, b: &BBox) -> BBox {
        let o = self.inverse(Point::new(b.x, b.y));
        BBox::new(o.x, o.y, b.w / self.scale, b.h / self.scale)
    }

    /// Region of the padded frame covered by image content.
    pub fn content_rect(&self) -> BBox {
        BBox::new(
            self.pad_left as f64,
            self.pad_top as f64,
            self.scaled.0 as f64,
            self.scaled.1 as f64,
        )
    }
}

/// Scale so the longer side equals `target` (bilinear), then center on a
/// zero-filled `target x target` canvas.
pub fn resize_pad(img: &RgbImage, target: u32) -> Result<(RgbImage, Transform), AugmentError> {
    let t = Transform::new(img.width(), img.height(), target)?;
    let scaled = if t.scaled == (img.width(), img.height()) {
        img.clone()
    } else {
        imageops::resize(img, t.scaled.0, t.scaled.1, imageops::FilterType::Triangle)
    };
    let mut out = RgbImage::new(target, target);
    imageops::replace(&mut out, &scaled, t.pad_left as i64, t.pad_top as i64);
    Ok((out, t))
}

/// Map a detection from the padded frame back to native image coordinates.
/// RLE masks are returned as their traced outline polygon.
pub fn inverse_transform(det: &Detection, t: &Transform) -> Result<Detection, AugmentError> {
    if det.bbox.intersection_area(&t.content_rect()) <= 0.0 {
        return Err(AugmentError::PaddingArtifact);
    }
    let poly = match &det.mask {
        MaskGeometry::Polygon { points } => points.clone(),
        MaskGeometry::Rle(rle) => trace_outline(&flakescan_core::rle_decode(rle)?)?,
    };
    Ok(Detection {
        category: det.category,
        score: det.score,
        bbox: t.inverse_box(&det.bbox),
        mask: MaskGeometry::Polygon {
            points: poly.map_points(|p| t.inverse(p)),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GeomOp {
    HFlip,
    VFlip,
    /// Clockwise quarter turns, 0..=3.
    Rotate { quarter_turns: u8 },
    Shift { dx: i32, dy: i32 },
}

impl GeomOp {
    pub fn rotation_degrees(deg: i32) -> Result<Self, AugmentError> {
        if deg % 90 != 0 {
            return Err(AugmentError::Rotation(deg));
        }
        Ok(GeomOp::Rotate {
            quarter_turns: (deg / 90).rem_euclid(4) as u8,
        })
    }

    /// Output dimensions for an input of `(w, h)`.
    pub fn output_dims(&self, w: u32, h: u32) -> (u32, u32) {
        match self {
            GeomOp::Rotate { quarter_turns } if quarter_turns % 2 == 1 => (h, w),
            _ => (w, h),
        }
    }

    pub fn map_point(&self, p: Point, w: u32, h: u32) -> Point {
        let (w, h) = (w as f64, h as f64);
        match *self {
            GeomOp::HFlip => Point::new(w - p.x, p.y),
            GeomOp::VFlip => Point::new(p.x, h - p.y),
            GeomOp::Rotate { quarter_turns } => match quarter_turns % 4 {
                0 => p,
                1 => Point::new(h - p.y, p.x),
                2 => Point::new(w - p.x, h - p.y),
                _ => Point::new(p.y, w - p.x),
            },
            GeomOp::Shift { dx, dy } => Point::new(p.x + dx as f64, p.y + dy as f64),
        }
    }

    /// Destination pixel of source pixel `(x, y)`, or `None` if shifted out.
    fn map_pixel(&self, x: u32, y: u32, w: u32, h: u32) -> Option<(u32, u32)> {
        let (x, y, w, h) = (x as i64, y as i64, w as i64, h as i64);
        let (nx, ny) = match *self {
            GeomOp::HFlip => (w - 1 - x, y),
            GeomOp::VFlip => (x, h - 1 - y),
            GeomOp::Rotate { quarter_turns } => match quarter_turns % 4 {
                0 => (x, y),
                1 => (h - 1 - y, x),
                2 => (w - 1 - x, h - 1 - y),
                _ => (y, w - 1 - x),
            },
            GeomOp::Shift { dx, dy } => (x + dx as i64, y + dy as i64),
        };
        let (ow, oh) = self.output_dims(w as u32, h as u32);
        (nx >= 0 && ny >= 0 && nx < ow as i64 && ny < oh as i64).then_some((nx as u32, ny as u32))
    }

    pub fn apply_image(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = img.dimensions();
        let (ow, oh) = self.output_dims(w, h);
        let mut out = RgbImage::new(ow, oh);
        for (x, y, px) in img.enumerate_pixels() {
            if let Some((nx, ny)) = self.map_pixel(x, y, w, h) {
                out.put_pixel(nx, ny, *px);
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &flakescan_core::BitMask) -> flakescan_core::BitMask {
        let (w, h) = (mask.width(), mask.height());
        let (ow, oh) = self.output_dims(w, h);
        let mut out = flakescan_core::BitMask::new(ow, oh).expect("nonzero dims");
        for (x, y) in mask.iter_set() {
            if let Some((nx, ny)) = self.map_pixel(x, y, w, h) {
                out.set(nx, ny, true);
            }
        }
        out
    }

    /// Transformed polygon, clipped to the output frame. `None` when nothing
    /// of it remains inside.
    pub fn apply_polygon(&self, poly: &Polygon, w: u32, h: u32) -> Option<Polygon> {
        let mapped = poly.map_points(|p| self.map_point(p, w, h));
        match self {
            GeomOp::Shift { .. } => {
                let (ow, oh) = self.output_dims(w, h);
                let clipped = mapped.clip_to_rect(&BBox::new(0.0, 0.0, ow as f64, oh as f64));
                (clipped.validate().is_ok() && clipped.area() > 0.0).then_some(clipped)
            }
            _ => Some(mapped),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Per-channel (R, G, B) multiplicative gain interval.
    pub channel_gain: [[f64; 2]; 3],
    pub gain_p: f64,
    /// Candidate rotations in degrees; one is drawn uniformly when rotation applies.
    pub rotations: Vec<i32>,
    pub rotate_p: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Inclusive integer shift interval per axis, px.
    pub shift_x: [i32; 2],
    pub shift_y: [i32; 2],
    pub shift_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            channel_gain: [[0.8, 1.2]; 3],
            gain_p: 0.5,
            rotations: vec![90, 180, 270],
            rotate_p: 0.5,
            hflip_p: 0.5,
            vflip_p: 0.5,
            shift_x: [-32, 32],
            shift_y: [-32, 32],
            shift_p: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, p) in [
            ("gain_p", self.gain_p),
            ("rotate_p", self.rotate_p),
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("shift_p", self.shift_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        for [lo, hi] in self.channel_gain {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(AugmentError::Config(format!("bad gain interval [{lo}, {hi}]")));
            }
        }
        for [lo, hi] in [self.shift_x, self.shift_y] {
            if lo > hi {
                return Err(AugmentError::Config(format!("bad shift interval [{lo}, {hi}]")));
            }
        }
        for &r in &self.rotations {
            GeomOp::rotation_degrees(r)?;
        }
        if self.rotate_p > 0.0 && self.rotations.is_empty() {
            return Err(AugmentError::Config("rotate_p > 0 with no rotations".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutput {
    pub image: RgbImage,
    pub annotations: Vec<AnnotationRecord>,
    pub gains: Option<[f64; 3]>,
    pub ops: Vec<GeomOp>,
    /// Ids of annotations shifted entirely out of the frame.
    pub dropped: Vec<u64>,
}

pub fn apply_gains(img: &RgbImage, gains: [f64; 3]) -> RgbImage {
    let mut out = img.clone();
    for px in out.pixels_mut() {
        for c in 0..3 {
            px.0[c] = (px.0[c] as f64 * gains[c]).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Apply geometric ops in order to an image and its annotations.
pub fn apply_ops(img: &RgbImage, anns: &[AnnotationRecord], ops: &[GeomOp]) -> (RgbImage, Vec<AnnotationRecord>, Vec<u64>) {
    let mut img = img.clone();
    let mut anns = anns.to_vec();
    let mut dropped = Vec::new();
    for op in ops {
        let (w, h) = img.dimensions();
        anns.retain_mut(|a| match op.apply_polygon(&a.polygon, w, h) {
            Some(p) => {
                a.bbox = p.bbox().expect("valid polygon");
                a.area = p.area();
                a.polygon = p;
                true
            }
            None => {
                dropped.push(a.id);
                false
            }
        });
        img = op.apply_image(&img);
    }
    (img, anns, dropped)
}

/// Draw and apply a random augmentation. Each op is decided independently
/// with its own probability; the result is a pure function of the inputs.
pub fn augment(
    img: &RgbImage,
    anns: &[AnnotationRecord],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<AugmentOutput, AugmentError> {
    cfg.validate()?;
    if img.width() == 0 || img.height() == 0 {
        return Err(AugmentError::ZeroDimension(img.width(), img.height()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains = rng.random_bool(cfg.gain_p).then(|| {
        let mut g = [1.0; 3];
        for (gc, [lo, hi]) in g.iter_mut().zip(cfg.channel_gain) {
            *gc = if lo == hi { lo } else { rng.random_range(lo..hi) };
        }
        g
    });
    let mut ops = Vec::new();
    if rng.random_bool(cfg.hflip_p) {
        ops.push(GeomOp::HFlip);
    }
    if rng.random_bool(cfg.vflip_p) {
        ops.push(GeomOp::VFlip);
    }
    if rng.random_bool(cfg.rotate_p) {
        let deg = cfg.rotations[rng.random_range(0..cfg.rotations.len())];
        ops.push(GeomOp::rotation_degrees(deg)?);
    }
    if rng.random_bool(cfg.shift_p) {
        ops.push(GeomOp::Shift {
            dx: rng.random_range(cfg.shift_x[0]..=cfg.shift_x[1]),
            dy: rng.random_range(cfg.shift_y[0]..=cfg.shift_y[1]),
        });
    }
    let base = match gains {
        Some(g) => apply_gains(img, g),
        None => img.clone(),
    };
    let (image, annotations, dropped) = apply_ops(&base, anns, &ops);
    Ok(AugmentOutput {
        image,
        annotations,
        gains,
        ops,
        dropped,
    })
}

/// Test pattern whose pixels encode their own coordinates.
pub fn coordinate_image(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x / 256) * 16 + y / 256) as u8]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flakescan_core::{Category, Material, Thickness};

    #[test]
    fn resize_examples() {
        let t = Transform::new(1920, 1080, 1024).unwrap();
        assert!((t.scale - 1024.0 / 1920.0).abs() < 1e-15);
        assert_eq!(t.scaled, (1024, 576));
        assert_eq!((t.pad_left, t.pad_top), (0, 224));
        assert_eq!(t.inverse(Point::new(0.0, 224.0)), Point::new(0.0, 0.0));

        let t = Transform::new(1024, 1024, 1024).unwrap();
        assert_eq!((t.scale, t.pad_left, t.pad_top), (1.0, 0, 0));
        let t = Transform::new(512, 512, 1024).unwrap();
        assert_eq!((t.scale, t.pad_left, t.pad_top), (2.0, 0, 0));
        assert!(matches!(Transform::new(0, 5, 1024), Err(AugmentError::ZeroDimension(0, 5))));
    }

    #[test]
    fn padding_is_zero() {
        let img = RgbImage::from_pixel(40, 20, Rgb([200, 100, 50]));
        let (out, t) = resize_pad(&img, 64).unwrap();
        assert_eq!(out.dimensions(), (64, 64));
        assert_eq!((t.pad_left, t.pad_top), (0, 16));
        for y in (0..16).chain(48..64) {
            for x in 0..64 {
                assert_eq!(out.get_pixel(x, y).0, [0, 0, 0]);
            }
        }
        assert_eq!(out.get_pixel(10, 30).0, [200, 100, 50]);
    }

    #[test]
    fn padding_artifact_flagged() {
        let t = Transform::new(1920, 1080, 1024).unwrap();
        let det = Detection::from_polygon(
            Category::new(Material::Graphene, Thickness::Mono),
            0.5,
            Polygon::from_coords(&[(10.0, 10.0), (20.0, 10.0), (20.0, 20.0)]),
        )
        .unwrap();
        assert!(matches!(inverse_transform(&det, &t), Err(AugmentError::PaddingArtifact)));
    }

    #[test]
    fn rotation_must_be_quarter_turn() {
        assert!(matches!(GeomOp::rotation_degrees(45), Err(AugmentError::Rotation(45))));
        assert_eq!(
            GeomOp::rotation_degrees(-90).unwrap(),
            GeomOp::Rotate { quarter_turns: 3 }
        );
    }

    #[test]
    fn unit_gain_is_identity() {
        let img = coordinate_image(17, 9);
        assert_eq!(apply_gains(&img, [1.0; 3]), img);
    }
}
