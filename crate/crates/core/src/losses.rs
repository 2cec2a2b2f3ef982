//! Reference evaluation of the multitask instance-segmentation loss
//! `L = alpha * L_cls + beta * L_box + gamma * L_mask`.
//!
//! Logarithms are natural. Probabilities are clipped to `[EPS, 1 - EPS]`
//! and the result reports whether clipping was needed.

use serde::{Deserialize, Serialize};

use crate::error::LossError;

pub const EPS: f64 = 1e-12;

/// Quadratic below |x| = 1, linear above.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryDistribution {
    probs: Vec<f64>,
}

impl CategoryDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, LossError> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(LossError::BadDistribution(sum));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// `-ln p_u`.
pub fn loss_cls(p: &CategoryDistribution, u: usize) -> Result<LossValue, LossError> {
    let pu = *p.probs.get(u).ok_or(LossError::ClassIndex {
        index: u,
        len: p.probs.len(),
    })?;
    let clipped = pu < EPS;
    Ok(LossValue {
        value: -pu.max(EPS).ln(),
        clipped,
    })
}

/// Predicted box regression `t` against ground-truth offsets `v`, ordered
/// `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub predicted: [f64; 4],
    pub target: [f64; 4],
}

pub fn loss_box(d: &BoxDelta) -> f64 {
    d.predicted.iter().zip(&d.target).map(|(t, v)| smooth_l1(t - v)).sum()
}

/// d loss_box / d predicted.
pub fn loss_box_grad(d: &BoxDelta) -> [f64; 4] {
    let mut g = [0.0; 4];
    for (i, gi) in g.iter_mut().enumerate() {
        *gi = smooth_l1_grad(d.predicted[i] - d.target[i]);
    }
    g
}

/// Predicted class-`k` mask probabilities and binary target on an `m x m` ROI grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub side: usize,
    pub predicted: Vec<f64>,
    pub target: Vec<u8>,
}

impl MaskPair {
    pub fn new(side: usize, predicted: Vec<f64>, target: Vec<u8>) -> Result<Self, LossError> {
        let mp = Self { side, predicted, target };
        mp.validate()?;
        Ok(mp)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let n = self.side * self.side;
        if self.side == 0 || self.predicted.len() != n || self.target.len() != n {
            return Err(LossError::MaskShape {
                side: self.side,
                predicted: self.predicted.len(),
                target: self.target.len(),
            });
        }
        if self.target.iter().any(|&y| y > 1) {
            return Err(LossError::NonBinaryTarget);
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over the ROI grid.
pub fn loss_mask(mp: &MaskPair) -> Result<LossValue, LossError> {
    mp.validate()?;
    let mut clipped = false;
    let mut sum = 0.0;
    for (&p, &y) in mp.predicted.iter().zip(&mp.target) {
        let q = p.clamp(EPS, 1.0 - EPS);
        clipped |= q != p;
        sum += if y == 1 { q.ln() } else { (1.0 - q).ln() };
    }
    Ok(LossValue {
        value: -sum / mp.predicted.len() as f64,
        clipped,
    })
}

/// d loss_mask / d predicted, per cell. Cells clipped to the epsilon band have
/// zero gradient.
pub fn loss_mask_grad(mp: &MaskPair) -> Result<Vec<f64>, LossError> {
    mp.validate()?;
    let n = mp.predicted.len() as f64;
    Ok(mp
        .predicted
        .iter()
        .zip(&mp.target)
        .map(|(&p, &y)| {
            if !(EPS..=1.0 - EPS).contains(&p) {
                0.0
            } else if y == 1 {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_mask: f64,
    pub l_total: f64,
    #[serde(default)]
    pub clipped: bool,
}

pub fn total_loss(l_cls: f64, l_box: f64, l_mask: f64, w: &LossWeights) -> Result<LossBreakdown, LossError> {
    w.validate()?;
    for (name, value) in [("l_cls", l_cls), ("l_box", l_box), ("l_mask", l_mask)] {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(LossError::BadComponent { name, value });
        }
    }
    Ok(LossBreakdown {
        l_cls,
        l_box,
        l_mask,
        l_total: w.alpha * l_cls + w.beta * l_box + w.gamma * l_mask,
        clipped: false,
    })
}

/// One region of interest: predicted class distribution, box regression and
/// mask, paired with its target class, box offsets and binary mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSample {
    pub class_probs: CategoryDistribution,
    pub true_class: usize,
    pub boxes: BoxDelta,
    pub mask: MaskPair,
}

pub fn roi_loss(s: &RoiSample, w: &LossWeights) -> Result<LossBreakdown, LossError> {
    let cls = loss_cls(&s.class_probs, s.true_class)?;
    let mask = loss_mask(&s.mask)?;
    let mut b = total_loss(cls.value, loss_box(&s.boxes), mask.value, w)?;
    b.clipped = cls.clipped || mask.clipped;
    Ok(b)
}
