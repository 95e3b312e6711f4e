//! Box overlap and prediction-to-ground-truth matching.
//!
//! Matching is COCO-style: per image and per category, detections are taken
//! in descending score order (ties by ascending input index) and each one
//! claims the still-unmatched ground truth with the highest IoU at or above
//! the threshold. Crowd regions are dropped before matching; zero-area ground
//! truths can never be claimed and zero-area detections are always false
//! positives.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, BoundingBox, Dataset, Detection};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("inputs span several images ({first} and {other}); matching is per image")]
    CrossImage { first: u64, other: u64 },
}

/// Intersection over union. Zero when the union has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = clamped_area(a) + clamped_area(b) - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn clamped_area(b: &BoundingBox) -> f64 {
    b.w.max(0.0) * b.h.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GtMatch {
    pub gt_id: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionMatch {
    /// Index into the detection slice handed to [`match_detections`].
    pub det_index: usize,
    pub matched: Option<GtMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryMatches {
    pub category_id: u64,
    /// Kept detections in processing order.
    pub detections: Vec<DetectionMatch>,
    pub unmatched_gt_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// `None` when both inputs were empty.
    pub image_id: Option<u64>,
    /// Sorted by category id.
    pub categories: Vec<CategoryMatches>,
}

impl MatchResult {
    pub fn empty() -> Self {
        Self {
            image_id: None,
            categories: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub const fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Self { tp, fp, fn_ }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self::new(self.tp + rhs.tp, self.fp + rhs.fp, self.fn_ + rhs.fn_)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Indices of `scores` sorted by descending score, ties by ascending index.
pub(crate) fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Claims the best free ground truth for `det`, marking it taken.
/// Returns the ground-truth position and IoU on success.
pub(crate) fn claim_best(
    det: &BoundingBox,
    gts: &[&Annotation],
    taken: &mut [bool],
    iou_thr: f64,
) -> Option<(usize, f64)> {
    if det.is_degenerate() {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, gt) in gts.iter().enumerate() {
        if taken[j] || gt.bbox.is_degenerate() {
            continue;
        }
        let v = iou(det, &gt.bbox);
        if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    if let Some((j, _)) = best {
        taken[j] = true;
    }
    best
}

/// Matches one image's detections against its ground truths.
pub fn match_detections(
    dets: &[Detection],
    gts: &[Annotation],
    iou_thr: f64,
    score_thr: f64,
) -> Result<MatchResult, MatchError> {
    let mut image_ids = dets.iter().map(|d| d.image_id).chain(gts.iter().map(|g| g.image_id));
    let image_id = image_ids.next();
    if let Some(first) = image_id {
        if let Some(other) = image_ids.find(|&id| id != first) {
            return Err(MatchError::CrossImage { first, other });
        }
    }

    let mut by_category: BTreeMap<u64, (Vec<usize>, Vec<&Annotation>)> = BTreeMap::new();
    for (i, det) in dets.iter().enumerate() {
        if det.score >= score_thr {
            by_category.entry(det.category_id).or_default().0.push(i);
        }
    }
    for gt in gts.iter().filter(|g| !g.iscrowd) {
        by_category.entry(gt.category_id).or_default().1.push(gt);
    }

    let categories = by_category
        .into_iter()
        .map(|(category_id, (det_idx, cat_gts))| {
            let order = score_order(det_idx.iter().map(|&i| dets[i].score));
            let mut taken = vec![false; cat_gts.len()];
            let detections = order
                .into_iter()
                .map(|k| {
                    let det_index = det_idx[k];
                    let matched = claim_best(&dets[det_index].bbox, &cat_gts, &mut taken, iou_thr)
                        .map(|(j, iou)| GtMatch {
                            gt_id: cat_gts[j].id,
                            iou,
                        });
                    DetectionMatch { det_index, matched }
                })
                .collect();
            let unmatched_gt_ids = cat_gts
                .iter()
                .zip(&taken)
                .filter(|(_, &t)| !t)
                .map(|(g, _)| g.id)
                .collect();
            CategoryMatches {
                category_id,
                detections,
                unmatched_gt_ids,
            }
        })
        .collect();

    Ok(MatchResult {
        image_id,
        categories,
    })
}

/// Matches every image of `gt` against the detections that fall on it.
/// Detections on images outside `gt` are ignored. Results are in image order.
pub fn match_dataset(gt: &Dataset, dets: &[Detection], iou_thr: f64, score_thr: f64) -> Vec<MatchResult> {
    let mut dets_by_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for det in dets {
        dets_by_image.entry(det.image_id).or_default().push(det.clone());
    }
    let mut gts_by_image: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for ann in &gt.annotations {
        gts_by_image.entry(ann.image_id).or_default().push(ann.clone());
    }
    gt.images
        .iter()
        .map(|img| {
            let d = dets_by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
            let g = gts_by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
            match_detections(d, g, iou_thr, score_thr).expect("inputs grouped by image")
        })
        .collect()
}

/// Tallies one image's matches into TP / FP / FN.
pub fn confusion_counts(m: &MatchResult) -> ConfusionCounts {
    m.categories.iter().map(category_counts).sum()
}

fn category_counts(c: &CategoryMatches) -> ConfusionCounts {
    let tp = c.detections.iter().filter(|d| d.matched.is_some()).count();
    ConfusionCounts::new(tp, c.detections.len() - tp, c.unmatched_gt_ids.len())
}

/// Counts pooled over images, split by category.
pub fn per_category_counts(results: &[MatchResult]) -> BTreeMap<u64, ConfusionCounts> {
    let mut out: BTreeMap<u64, ConfusionCounts> = BTreeMap::new();
    for c in results.iter().flat_map(|m| &m.categories) {
        *out.entry(c.category_id).or_default() += category_counts(c);
    }
    out
}
