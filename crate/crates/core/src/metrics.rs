//! Detection evaluation: IoU, greedy matching, AP/mAP and whole-image
//! confusion counts.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::detection::{AnnotationRecord, Detection};
use crate::error::{GeometryError, MetricsError};
use crate::geometry::{BBox, BitMask};
use crate::raster::rasterize_polygon;
use crate::taxonomy::Category;

pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou_mask(a: &BitMask, b: &BitMask) -> Result<f64, GeometryError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(GeometryError::DimensionMismatch {
            a: (a.width(), a.height()),
            b: (b.width(), b.height()),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouGeometry {
    #[default]
    Box,
    Mask,
}

/// What makes a detection "correct" for a ground-truth flake.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCriteria {
    pub iou_threshold: f64,
    pub require_material: bool,
    pub require_thickness: bool,
    pub geometry: IouGeometry,
}

impl Default for MatchCriteria {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            require_material: true,
            require_thickness: false,
            geometry: IouGeometry::Box,
        }
    }
}

impl MatchCriteria {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(MetricsError::BadThreshold(self.iou_threshold));
        }
        Ok(())
    }

    fn compatible(&self, det: &Category, gt: &Category) -> bool {
        (!self.require_material || det.material == gt.material)
            && (!self.require_thickness || det.thickness == gt.thickness)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Canonical detection order: descending score, then geometry and category so
/// that equal-score detections do not depend on input order.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.x.total_cmp(&b.bbox.x))
        .then_with(|| a.bbox.y.total_cmp(&b.bbox.y))
        .then_with(|| a.bbox.w.total_cmp(&b.bbox.w))
        .then_with(|| a.bbox.h.total_cmp(&b.bbox.h))
        .then_with(|| a.category.cmp(&b.category))
}

/// Pairwise IoU table, `table[d][g]`.
struct IouTable(Vec<Vec<f64>>);

impl IouTable {
    fn build(
        dets: &[Detection],
        gts: &[AnnotationRecord],
        geometry: IouGeometry,
        dims: Option<(u32, u32)>,
    ) -> Result<Self, MetricsError> {
        let rows = match geometry {
            IouGeometry::Box => dets
                .iter()
                .map(|d| gts.iter().map(|g| iou_box(&d.bbox, &g.bbox)).collect())
                .collect(),
            IouGeometry::Mask => {
                let (w, h) = dims.ok_or(GeometryError::ZeroDimension { width: 0, height: 0 })?;
                let gt_masks = gts
                    .iter()
                    .map(|g| rasterize_polygon(&g.polygon, w, h))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut rows = Vec::with_capacity(dets.len());
                for d in dets {
                    let dm = d.mask.to_bitmask(w, h)?;
                    rows.push(gt_masks.iter().map(|gm| iou_mask(&dm, gm)).collect::<Result<Vec<_>, _>>()?);
                }
                rows
            }
        };
        Ok(IouTable(rows))
    }
}

/// Greedy one-to-one matching with box IoU.
///
/// Detections are visited by descending score; each takes the unmatched ground
/// truth of highest IoU at or above the threshold, lower index on ties. With
/// `class_aware` the material must agree.
pub fn match_detections(
    dets: &[Detection],
    gts: &[AnnotationRecord],
    iou_threshold: f64,
    class_aware: bool,
) -> Result<MatchResult, MetricsError> {
    let criteria = MatchCriteria {
        iou_threshold,
        require_material: class_aware,
        require_thickness: false,
        geometry: IouGeometry::Box,
    };
    match_with(dets, gts, &criteria, None)
}

/// Greedy matching under arbitrary criteria. `dims` is required for mask IoU.
pub fn match_with(
    dets: &[Detection],
    gts: &[AnnotationRecord],
    criteria: &MatchCriteria,
    dims: Option<(u32, u32)>,
) -> Result<MatchResult, MetricsError> {
    criteria.validate()?;
    let table = IouTable::build(dets, gts, criteria.geometry, dims)?;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| detection_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    Ok(greedy(&order, dets, gts, criteria, &table))
}

fn greedy(
    order: &[usize],
    dets: &[Detection],
    gts: &[AnnotationRecord],
    criteria: &MatchCriteria,
    table: &IouTable,
) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || !criteria.compatible(&dets[d].category, &gt.category) {
                continue;
            }
            let iou = table.0[d][g];
            if iou >= criteria.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                taken[g] = true;
                result.pairs.push(MatchPair {
                    detection: d,
                    ground_truth: g,
                    iou,
                });
            }
            None => result.unmatched_detections.push(d),
        }
    }
    result.unmatched_detections.sort_unstable();
    result.unmatched_gts = (0..gts.len()).filter(|&g| !taken[g]).collect();
    result
}

/// One evaluated image: its ground truth and detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub width: u32,
    pub height: u32,
    pub gts: Vec<AnnotationRecord>,
    pub dets: Vec<Detection>,
}

/// How detections are grouped into AP classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    #[default]
    Material,
    Category,
}

impl GroupBy {
    pub fn key(&self, c: &Category) -> String {
        match self {
            GroupBy::Material => c.material.to_string(),
            GroupBy::Category => c.name(),
        }
    }
}

/// Ranked true/false-positive flags for one class, pooled across images.
pub fn ranked_hits(
    images: &[EvalImage],
    criteria: &MatchCriteria,
    group_by: GroupBy,
    key: &str,
) -> Result<(Vec<bool>, usize), MetricsError> {
    criteria.validate()?;
    // the class itself is the category constraint
    let in_class = MatchCriteria {
        require_material: false,
        require_thickness: false,
        ..*criteria
    };
    let mut n_gt = 0;
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    let mut per_image = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let dets: Vec<Detection> = img.dets.iter().filter(|d| group_by.key(&d.category) == key).cloned().collect();
        let gts: Vec<AnnotationRecord> = img.gts.iter().filter(|g| group_by.key(&g.category) == key).cloned().collect();
        n_gt += gts.len();
        let m = match_with(&dets, &gts, &in_class, Some((img.width, img.height)))?;
        let mut hit = vec![false; dets.len()];
        for p in &m.pairs {
            hit[p.detection] = true;
        }
        ranked.extend((0..dets.len()).map(|d| (i, d)));
        per_image.push((dets, hit));
    }
    ranked.sort_by(|&(ia, da), &(ib, db)| {
        detection_order(&per_image[ia].0[da], &per_image[ib].0[db])
            .then(ia.cmp(&ib))
            .then(da.cmp(&db))
    });
    let hits = ranked.into_iter().map(|(i, d)| per_image[i].1[d]).collect();
    Ok((hits, n_gt))
}

/// All-point interpolated area under the precision envelope.
pub fn ap_from_hits(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..hits.len() {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    ap
}

/// AP for a single class. `None` when the class has no ground truth.
pub fn average_precision(
    images: &[EvalImage],
    criteria: &MatchCriteria,
    group_by: GroupBy,
    key: &str,
) -> Result<Option<f64>, MetricsError> {
    let (hits, n_gt) = ranked_hits(images, criteria, group_by, key)?;
    Ok((n_gt > 0).then(|| ap_from_hits(&hits, n_gt)))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class: BTreeMap<String, f64>,
    /// Classes seen only in detections; excluded from the mean.
    pub without_ground_truth: Vec<String>,
    pub map: Option<f64>,
}

pub fn map_at(images: &[EvalImage], criteria: &MatchCriteria, group_by: GroupBy) -> Result<MapReport, MetricsError> {
    let mut gt_keys = std::collections::BTreeSet::new();
    let mut det_keys = std::collections::BTreeSet::new();
    for img in images {
        gt_keys.extend(img.gts.iter().map(|g| group_by.key(&g.category)));
        det_keys.extend(img.dets.iter().map(|d| group_by.key(&d.category)));
    }
    let mut report = MapReport::default();
    for key in &gt_keys {
        if let Some(ap) = average_precision(images, criteria, group_by, key)? {
            report.per_class.insert(key.clone(), ap);
        }
    }
    report.without_ground_truth = det_keys.difference(&gt_keys).cloned().collect();
    if !report.per_class.is_empty() {
        report.map = Some(report.per_class.values().sum::<f64>() / report.per_class.len() as f64);
    }
    Ok(report)
}

/// Whole-image outcome counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageOutcome {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

/// Classify one image: with ground truth it is a true positive when at least
/// one detection is correct for some flake, otherwise a false negative;
/// without ground truth any detection makes it a false positive.
pub fn classify_image(img: &EvalImage, criteria: &MatchCriteria) -> Result<ImageOutcome, MetricsError> {
    criteria.validate()?;
    if img.gts.is_empty() {
        return Ok(if img.dets.is_empty() {
            ImageOutcome::TrueNegative
        } else {
            ImageOutcome::FalsePositive
        });
    }
    let table = IouTable::build(&img.dets, &img.gts, criteria.geometry, Some((img.width, img.height)))?;
    let any_correct = img.dets.iter().enumerate().any(|(d, det)| {
        img.gts
            .iter()
            .enumerate()
            .any(|(g, gt)| criteria.compatible(&det.category, &gt.category) && table.0[d][g] >= criteria.iou_threshold)
    });
    Ok(if any_correct {
        ImageOutcome::TruePositive
    } else {
        ImageOutcome::FalseNegative
    })
}

pub fn per_image_confusion(images: &[EvalImage], criteria: &MatchCriteria) -> Result<ConfusionCounts, MetricsError> {
    let mut c = ConfusionCounts::default();
    for img in images {
        match classify_image(img, criteria)? {
            ImageOutcome::TruePositive => c.tp += 1,
            ImageOutcome::FalsePositive => c.fp += 1,
            ImageOutcome::FalseNegative => c.fn_ += 1,
            ImageOutcome::TrueNegative => c.tn += 1,
        }
    }
    Ok(c)
}

/// Precision and recall; `None` marks an undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn precision_recall(c: &ConfusionCounts) -> PrScores {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    PrScores {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    }
}
