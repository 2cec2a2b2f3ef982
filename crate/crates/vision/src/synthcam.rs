//! Synthetic microscope: chip scenes with planted flakes, tile rendering under
//! a global illumination model, and a motorized stage with latency.
//!
//! Colors follow a linear layer-contrast model, not thin-film optics. A flake
//! pixel is the local background darkened by `c * min(layers, L_SAT)` per
//! channel, with `c` a per-material coefficient.

use flakescan_core::{thickness_category, AnnotationRecord, BBox, Category, Material, Point, Polygon, Thickness};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::VisionError;

/// Layer count beyond which contrast stops growing.
pub const L_SAT: u32 = 40;
/// Intensity at which the base background color is reproduced unscaled.
pub const NOMINAL_INTENSITY: f64 = 220.0;
/// Ground truth omits flake fragments smaller than this, px².
pub const MIN_VISIBLE_AREA_PX: f64 = 16.0;
pub const NOISE_SIGMA: f64 = 2.0;

/// Per-channel (R, G, B) fractional darkening per layer.
pub fn contrast_coefficients(m: Material) -> [f64; 3] {
    match m {
        Material::Graphene => [0.010, 0.018, 0.008],
        Material::HBn => [0.004, 0.006, 0.012],
        Material::MoS2 => [0.015, 0.012, 0.006],
        Material::WTe2 => [0.012, 0.014, 0.016],
    }
}

/// Expected fractional contrast `(bg - flake) / bg` of a flake.
pub fn expected_contrast(m: Material, layers: u32) -> [f64; 3] {
    contrast_coefficients(m).map(|c| c * layers.min(L_SAT) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChipSpec {
    pub chip_id: String,
    pub extent_um: [f64; 2],
    /// Expected flakes per cm²; the count is Poisson distributed.
    pub density_per_cm2: f64,
    /// Exact flake count, overriding the density draw.
    pub count: Option<usize>,
    pub material_mix: Vec<(Material, f64)>,
    /// Relative weights of mono, few and thick flakes.
    pub thickness_weights: [f64; 3],
    /// Interval for the outer vertex radius, µm. Flake diameter is at most
    /// twice the upper bound.
    pub radius_um: [f64; 2],
    /// Minimum distance from flake bounding boxes to the chip edge, µm.
    pub edge_margin_um: f64,
    /// Minimum gap between flake bounding boxes, µm.
    pub min_gap_um: f64,
    pub max_attempts: usize,
    pub background: [f64; 3],
}

impl Default for ChipSpec {
    fn default() -> Self {
        Self {
            chip_id: "chip-0".into(),
            extent_um: [10_000.0, 10_000.0],
            density_per_cm2: 25.0,
            count: None,
            material_mix: vec![(Material::WTe2, 1.0)],
            thickness_weights: [1.0, 1.0, 1.0],
            radius_um: [4.0, 10.0],
            edge_margin_um: 12.0,
            min_gap_um: 2.0,
            max_attempts: 1000,
            background: [200.0, 170.0, 210.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFlake {
    pub id: u64,
    /// Outline in chip coordinates, µm.
    pub polygon_um: Polygon,
    pub material: Material,
    pub layers: u32,
}

impl PlantedFlake {
    pub fn category(&self) -> Category {
        Category::new(
            self.material,
            thickness_category(self.layers).expect("generated layer counts are in taxonomy"),
        )
    }

    pub fn bbox_um(&self) -> BBox {
        self.polygon_um.bbox().expect("valid polygon")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipScene {
    pub chip_id: String,
    pub extent_um: [f64; 2],
    pub flakes: Vec<PlantedFlake>,
    pub background: [f64; 3],
    pub seed: u64,
}

fn layer_range(t: Thickness) -> (u32, u32) {
    match t {
        Thickness::Mono => (1, 1),
        Thickness::Few => (2, 10),
        Thickness::Thick => (11, L_SAT),
    }
}

fn weighted<T: Copy>(rng: &mut impl Rng, items: &[(T, f64)]) -> T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut r = rng.random_range(0.0..total);
    for &(item, w) in items {
        if r < w {
            return item;
        }
        r -= w;
    }
    items.last().expect("nonempty").0
}

fn flake_outline(rng: &mut impl Rng, center: Point, r_max: f64) -> Polygon {
    let n = rng.random_range(6..=10);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / n as f64;
    Polygon::new(
        (0..n)
            .map(|k| {
                let a = phase + step * (k as f64 + rng.random_range(-0.3..0.3));
                let r = r_max * rng.random_range(0.7..=1.0);
                Point::new(center.x + r * a.cos(), center.y + r * a.sin())
            })
            .collect(),
    )
}

pub fn generate_chip(spec: &ChipSpec, seed: u64) -> Result<ChipScene, VisionError> {
    let [w, h] = spec.extent_um;
    let [r_lo, r_hi] = spec.radius_um;
    if !(w > 0.0 && h > 0.0) || !(r_lo > 0.0 && r_lo <= r_hi) || spec.density_per_cm2 < 0.0 {
        return Err(VisionError::Spec("extent, radius interval and density must be positive".into()));
    }
    let margin = spec.edge_margin_um + r_hi;
    if 2.0 * margin >= w.min(h) {
        return Err(VisionError::Spec("chip too small for the flake size and edge margin".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = match spec.count {
        Some(n) => n,
        None => {
            let lambda = spec.density_per_cm2 * w * h / 1e8;
            if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| VisionError::Spec(e.to_string()))?
                    .sample(&mut rng) as usize
            } else {
                0
            }
        }
    };
    if n > 0 && (spec.material_mix.is_empty() || spec.thickness_weights.iter().all(|w| *w <= 0.0)) {
        return Err(VisionError::Spec("material mix and thickness weights must be nonempty".into()));
    }
    let thickness_mix: Vec<(Thickness, f64)> = Thickness::ALL
        .iter()
        .zip(spec.thickness_weights)
        .filter(|(_, w)| *w > 0.0)
        .map(|(t, w)| (*t, w))
        .collect();

    let mut flakes: Vec<PlantedFlake> = Vec::with_capacity(n);
    for id in 1..=n as u64 {
        let material = weighted(&mut rng, &spec.material_mix);
        let (lo, hi) = layer_range(weighted(&mut rng, &thickness_mix));
        let layers = rng.random_range(lo..=hi);
        let r_max = rng.random_range(r_lo..=r_hi);
        let mut placed = None;
        for _ in 0..spec.max_attempts {
            let c = Point::new(rng.random_range(margin..w - margin), rng.random_range(margin..h - margin));
            let poly = flake_outline(&mut rng, c, r_max);
            let b = poly.bbox().expect("nonempty");
            let g = spec.min_gap_um;
            let grown = BBox::new(b.x - g, b.y - g, b.w + 2.0 * g, b.h + 2.0 * g);
            if flakes.iter().all(|f| grown.intersection_area(&f.bbox_um()) <= 0.0) {
                placed = Some(poly);
                break;
            }
        }
        let polygon_um = placed.ok_or(VisionError::TooDense {
            placed: flakes.len(),
            requested: n,
        })?;
        flakes.push(PlantedFlake {
            id,
            polygon_um,
            material,
            layers,
        });
    }
    Ok(ChipScene {
        chip_id: spec.chip_id.clone(),
        extent_um: spec.extent_um,
        flakes,
        background: spec.background,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpticsConfig {
    pub fov_um: [f64; 2],
    pub sensor_px: [u32; 2],
    pub objective: String,
    pub autofocus_ms: f64,
    pub capture_ms: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            fov_um: [256.0, 256.0],
            sensor_px: [1024, 1024],
            objective: "50x".into(),
            autofocus_ms: 100.0,
            capture_ms: 150.0,
        }
    }
}

impl OpticsConfig {
    pub fn um_per_px(&self) -> f64 {
        self.fov_um[0] / self.sensor_px[0] as f64
    }

    pub fn validate(&self) -> Result<(), VisionError> {
        let [fw, fh] = self.fov_um;
        let [sw, sh] = self.sensor_px;
        if !(fw > 0.0 && fh > 0.0) || sw == 0 || sh == 0 {
            return Err(VisionError::Optics("field of view and sensor must be positive".into()));
        }
        let (ux, uy) = (fw / sw as f64, fh / sh as f64);
        if (ux - uy).abs() > 1e-9 * ux {
            return Err(VisionError::Optics(format!("anisotropic pixels: {ux} vs {uy} µm/px")));
        }
        if self.autofocus_ms < 0.0 || self.capture_ms < 0.0 {
            return Err(VisionError::Optics("latencies must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlluminationSetting {
    /// Lamp intensity, arbitrary units.
    pub intensity: f64,
    pub gains: [f64; 3],
}

impl Default for IlluminationSetting {
    fn default() -> Self {
        Self {
            intensity: NOMINAL_INTENSITY,
            gains: [1.0; 3],
        }
    }
}

impl IlluminationSetting {
    pub fn with_intensity(intensity: f64) -> Self {
        Self {
            intensity,
            ..Self::default()
        }
    }

    pub fn scale(&self) -> f64 {
        self.intensity / NOMINAL_INTENSITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTile {
    pub image: RgbImage,
    /// Flakes visible in the tile, in tile px. `id` is the planted flake id and
    /// `image_id` is 0.
    pub ground_truth: Vec<AnnotationRecord>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fractional bits of the fixed-point pixel pipeline.
const FRAC: u32 = 20;

/// Approximately Gaussian noise with standard deviation `NOISE_SIGMA` for the
/// three channels of one pixel, in units of `2^-FRAC`. Each channel is the
/// scaled sum of four 10-bit uniforms drawn from two hashes.
fn pixel_noise(key: u64, x: u32, y: u32) -> [i64; 3] {
    let base = key ^ ((y as u64) << 33 | (x as u64) << 1);
    let a = splitmix64(base);
    let b = splitmix64(base | 1);
    let bits = [a, a >> 40 | b << 24, b >> 16];
    // Uniforms on [0, 1) sum to mean 2 and variance 4/12.
    const STEP: i64 = (NOISE_SIGMA * 1.732_050_807_568_877_2 / 1024.0 * (1u64 << FRAC) as f64) as i64;
    bits.map(|v| {
        let sum = (v & 0x3FF) + ((v >> 10) & 0x3FF) + ((v >> 20) & 0x3FF) + ((v >> 30) & 0x3FF);
        (sum as i64 - 2046) * STEP
    })
}

fn tile_key(scene_seed: u64, origin: Point) -> u64 {
    splitmix64(splitmix64(scene_seed ^ origin.x.to_bits()) ^ origin.y.to_bits().rotate_left(17))
}

/// Render the tile whose top-left corner sits at `origin` (µm).
///
/// Pixel value = (base + noise) × (I/220) × gain × (1 − c·min(L, L_SAT)),
/// rounded and clamped, evaluated in fixed point. Noise depends only on the
/// scene seed, tile origin, pixel and channel, so changing the illumination
/// rescales every pixel.
pub fn render_tile(scene: &ChipScene, origin: Point, optics: &OpticsConfig, illum: &IlluminationSetting) -> RenderedTile {
    let [w, h] = optics.sensor_px;
    let upp = optics.um_per_px();
    let s = illum.scale();
    let key = tile_key(scene.seed, origin);
    let factor: [f64; 3] = std::array::from_fn(|c| s * illum.gains[c]);

    // Index into `contrasts` per pixel; 0 means bare substrate.
    let mut flake_at: Vec<u16> = vec![0; (w * h) as usize];
    let mut contrasts: Vec<[f64; 3]> = vec![[0.0; 3]];
    let tile_um = BBox::new(origin.x, origin.y, optics.fov_um[0], optics.fov_um[1]);
    for f in &scene.flakes {
        if f.bbox_um().intersection_area(&tile_um) <= 0.0 {
            continue;
        }
        let px_poly = f
            .polygon_um
            .map_points(|p| Point::new((p.x - origin.x) / upp, (p.y - origin.y) / upp));
        let b = px_poly.bbox().expect("valid");
        let x0 = b.x.floor().max(0.0) as u32;
        let y0 = b.y.floor().max(0.0) as u32;
        let x1 = (b.right().ceil().max(0.0) as u32).min(w);
        let y1 = (b.bottom().ceil().max(0.0) as u32).min(h);
        if x1 > x0 && y1 > y0 && contrasts.len() < u16::MAX as usize {
            let local = px_poly.map_points(|p| Point::new(p.x - x0 as f64, p.y - y0 as f64));
            let mask = flakescan_core::rasterize_polygon(&local, x1 - x0, y1 - y0).expect("valid polygon");
            let k = contrasts.len() as u16;
            contrasts.push(expected_contrast(f.material, f.layers));
            for (i, j) in mask.iter_set() {
                flake_at[((y0 + j) * w + x0 + i) as usize] = k;
            }
        }
    }
    // Fixed point: background and noise carry FRAC fractional bits, the
    // multipliers 16.
    let one = (1u64 << FRAC) as f64;
    let base: [i64; 3] = scene.background.map(|b| (b * one).round() as i64);
    let multipliers: Vec<[i64; 3]> = contrasts
        .iter()
        .map(|d| std::array::from_fn(|c| (factor[c] * (1.0 - d[c]) * 65536.0).round() as i64))
        .collect();
    let half = 1i64 << (FRAC + 15);

    let mut image = RgbImage::new(w, h);
    for (y, row) in image.as_mut().chunks_exact_mut(3 * w as usize).enumerate() {
        let row_flakes = &flake_at[y * w as usize..(y + 1) * w as usize];
        for (x, (px, &k)) in row.chunks_exact_mut(3).zip(row_flakes).enumerate() {
            let noise = pixel_noise(key, x as u32, y as u32);
            let m = &multipliers[k as usize];
            for c in 0..3 {
                let v = ((base[c] + noise[c]) * m[c] + half) >> (FRAC + 16);
                px[c] = v.clamp(0, 255) as u8;
            }
        }
    }
    RenderedTile {
        image,
        ground_truth: tile_ground_truth(scene, origin, optics),
    }
}

/// Ground truth of the tile at `origin` without rendering pixels: planted
/// flakes clipped to the frame, in tile px, dropping slivers under
/// `MIN_VISIBLE_AREA_PX`.
pub fn tile_ground_truth(scene: &ChipScene, origin: Point, optics: &OpticsConfig) -> Vec<AnnotationRecord> {
    let [w, h] = optics.sensor_px;
    let upp = optics.um_per_px();
    let tile_um = BBox::new(origin.x, origin.y, optics.fov_um[0], optics.fov_um[1]);
    let frame = BBox::new(0.0, 0.0, w as f64, h as f64);
    scene
        .flakes
        .iter()
        .filter(|f| f.bbox_um().intersection_area(&tile_um) > 0.0)
        .filter_map(|f| {
            let clipped = f
                .polygon_um
                .map_points(|p| Point::new((p.x - origin.x) / upp, (p.y - origin.y) / upp))
                .clip_to_rect(&frame);
            (clipped.validate().is_ok() && clipped.area() >= MIN_VISIBLE_AREA_PX)
                .then(|| AnnotationRecord::from_polygon(f.id, 0, f.category(), clipped).expect("validated polygon"))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub fixed_ms: f64,
    pub ms_per_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub position: Point,
    /// Reachable positions, µm.
    pub limits: BBox,
    pub latency: StageLatency,
    pub autofocus_ms: f64,
}

impl StageState {
    pub fn new(limits: BBox, latency: StageLatency, autofocus_ms: f64) -> Self {
        Self {
            position: Point::new(limits.x, limits.y),
            limits,
            latency,
            autofocus_ms,
        }
    }

    fn reachable(&self, p: Point) -> bool {
        p.x >= self.limits.x && p.x <= self.limits.right() && p.y >= self.limits.y && p.y <= self.limits.bottom()
    }

    /// Move to `target`, returning the simulated elapsed ms. Out-of-limits
    /// targets leave the stage where it is.
    pub fn stage_move(&mut self, target: Point) -> Result<f64, VisionError> {
        if !self.reachable(target) || !target.x.is_finite() || !target.y.is_finite() {
            return Err(VisionError::Motion {
                x: target.x,
                y: target.y,
            });
        }
        let dist_mm = ((target.x - self.position.x).powi(2) + (target.y - self.position.y).powi(2)).sqrt() / 1000.0;
        self.position = target;
        Ok(self.latency.fixed_ms + self.latency.ms_per_mm * dist_mm)
    }

    pub fn stage_autofocus(&self) -> f64 {
        self.autofocus_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_examples() {
        let lat = StageLatency {
            fixed_ms: 50.0,
            ms_per_mm: 100.0,
        };
        let mut s = StageState::new(BBox::new(0.0, 0.0, 5000.0, 5000.0), lat, 30.0);
        assert_eq!(s.stage_move(Point::new(0.0, 0.0)).unwrap(), 50.0);
        assert!((s.stage_move(Point::new(1000.0, 0.0)).unwrap() - 150.0).abs() < 1e-12);
        assert!(s.stage_move(Point::new(6000.0, 0.0)).is_err());
        assert_eq!(s.position, Point::new(1000.0, 0.0));
        assert_eq!(s.stage_autofocus(), 30.0);
    }

    #[test]
    fn empty_density_gives_empty_scene() {
        let spec = ChipSpec {
            density_per_cm2: 0.0,
            ..Default::default()
        };
        assert!(generate_chip(&spec, 1).unwrap().flakes.is_empty());
    }

    #[test]
    fn noise_moments() {
        let n = 200_000;
        let vals: Vec<f64> = (0..n)
            .map(|i| pixel_noise(7, i % 1000, i / 1000)[(i % 3) as usize] as f64 / (1u64 << FRAC) as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var.sqrt() - NOISE_SIGMA).abs() < 0.02, "{}", var.sqrt());
    }

    #[test]
    fn too_dense_is_error() {
        let spec = ChipSpec {
            extent_um: [100.0, 100.0],
            count: Some(200),
            max_attempts: 50,
            ..Default::default()
        };
        assert!(matches!(generate_chip(&spec, 3), Err(VisionError::TooDense { .. })));
    }

    #[test]
    fn optics_defaults() {
        let o = OpticsConfig::default();
        o.validate().unwrap();
        assert_eq!(o.um_per_px(), 0.25);
    }
}
