//! Conventional rule-based flake detection: fixed reference-color contrast
//! windows, connected components and an area filter.
//!
//! Calibration happens once, at tuning time. Nothing adapts to the image being
//! processed, which is what makes the detector fragile under changing
//! illumination.

use flakescan_core::{bbox_from_mask, rle_encode, BitMask, Category, Detection, MaskGeometry};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::VisionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleParams {
    /// Background color the windows are relative to.
    pub reference: [f64; 3],
    /// Per-channel `[min, max]` of `(reference - pixel) / reference`.
    pub windows: [[f64; 2]; 3],
    pub min_area: u32,
    pub max_area: u32,
    pub category: Category,
    #[serde(default)]
    pub connectivity: Connectivity,
}

impl RuleParams {
    /// Windows of `± half_width` around an expected contrast.
    pub fn calibrated(
        reference: [f64; 3],
        expected: [f64; 3],
        half_width: f64,
        min_area: u32,
        max_area: u32,
        category: Category,
    ) -> Self {
        Self {
            reference,
            windows: expected.map(|c| [c - half_width, c + half_width]),
            min_area,
            max_area,
            category,
            connectivity: Connectivity::Four,
        }
    }

    pub fn validate(&self) -> Result<(), VisionError> {
        for [lo, hi] in self.windows {
            if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || lo > hi {
                return Err(VisionError::Params(format!("contrast window [{lo}, {hi}] not within [-1, 1]")));
            }
        }
        if self.reference.iter().any(|r| !(*r > 0.0)) {
            return Err(VisionError::Params("reference color must be positive".into()));
        }
        if self.min_area == 0 || self.min_area >= self.max_area {
            return Err(VisionError::Params(format!(
                "area bounds must satisfy 0 < min < max, got {}..{}",
                self.min_area, self.max_area
            )));
        }
        Ok(())
    }
}

/// Per-channel histogram mode, bin width 1. Ties go to the lower value.
pub fn estimate_background(img: &RgbImage) -> [f64; 3] {
    let mut hist = [[0u32; 256]; 3];
    for px in img.pixels() {
        for c in 0..3 {
            hist[c][px.0[c] as usize] += 1;
        }
    }
    hist.map(|h| {
        let mut best = 0;
        for v in 1..256 {
            if h[v] > h[best] {
                best = v;
            }
        }
        best as f64
    })
}

/// Binary map of pixels whose contrast falls inside every channel window.
pub fn contrast_map(img: &RgbImage, params: &RuleParams) -> BitMask {
    let (w, h) = img.dimensions();
    let bits = img
        .pixels()
        .map(|px| {
            (0..3).all(|c| {
                let r = params.reference[c];
                let contrast = (r - px.0[c] as f64) / r;
                let [lo, hi] = params.windows[c];
                contrast >= lo && contrast <= hi
            })
        })
        .collect();
    BitMask::from_bits(w, h, bits).expect("dimensions match")
}

/// Connected components as lists of pixel indices, in raster order of their
/// first pixel.
pub fn connected_components(mask: &BitMask, conn: Connectivity) -> Vec<Vec<u32>> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let bits = mask.bits();
    let mut seen = vec![false; bits.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    let offsets: &[(i64, i64)] = match conn {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
    };
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i as u32);
            let (x, y) = (i as i64 % w, i as i64 / w);
            for (dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if bits[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn detect_rule_based(img: &RgbImage, params: &RuleParams) -> Result<Vec<Detection>, VisionError> {
    params.validate()?;
    let (w, h) = img.dimensions();
    let map = contrast_map(img, params);
    let mut dets = Vec::new();
    for comp in connected_components(&map, params.connectivity) {
        let area = comp.len() as u32;
        if area < params.min_area || area > params.max_area {
            continue;
        }
        let mut m = BitMask::new(w, h).expect("nonempty image");
        for &i in &comp {
            m.set(i % w, i / w, true);
        }
        dets.push(Detection {
            category: params.category,
            score: 1.0,
            bbox: bbox_from_mask(&m).expect("nonempty component"),
            mask: MaskGeometry::Rle(rle_encode(&m)),
        });
    }
    Ok(dets)
}
