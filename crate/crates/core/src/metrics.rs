//! Precision, recall, F1, interpolated average precision and the
//! mAP@50 / mAP@75 / mAP@[.50:.95] suite, plus aggregation across folds.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, Dataset, Detection};
use crate::matching::{self, ConfusionCounts};

/// Number of recall samples used to integrate the PR curve.
pub const RECALL_SAMPLES: usize = 101;

/// IoU thresholds .50, .55, ..., .95, built from exact hundredths.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("average precision inputs mix categories {0} and {1}")]
    MixedCategories(u64, u64),
    #[error("metric undefined: no category has ground truth")]
    Undefined,
    #[error("no fold reports to aggregate")]
    NoReports,
    #[error("fold reports mix labels: {0}")]
    MixedLabels(String),
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Detections scoring at least this much produced the point.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub category_id: u64,
    pub iou_threshold: f64,
    pub ap: f64,
    pub points: Vec<PrPoint>,
}

/// Average precision of one category at one IoU threshold.
///
/// Detections are swept in descending score and matched greedily per image.
/// A PR point is emitted at every distinct score, the precision envelope is
/// taken, and the envelope is averaged over recall 0.00, 0.01, ..., 1.00.
/// Returns `Ok(None)` when the category has no (non-crowd) ground truth so
/// callers can skip it instead of scoring it zero.
pub fn average_precision(
    dets: &[Detection],
    gts: &[Annotation],
    iou_thr: f64,
) -> Result<Option<ApResult>, MetricsError> {
    let mut categories = dets
        .iter()
        .map(|d| d.category_id)
        .chain(gts.iter().map(|g| g.category_id));
    let Some(category_id) = categories.next() else {
        return Ok(None);
    };
    if let Some(other) = categories.find(|&c| c != category_id) {
        return Err(MetricsError::MixedCategories(category_id, other));
    }

    let mut gts_by_image: HashMap<u64, Vec<&Annotation>> = HashMap::new();
    for g in gts.iter().filter(|g| !g.iscrowd) {
        gts_by_image.entry(g.image_id).or_default().push(g);
    }
    let npos: usize = gts_by_image.values().map(Vec::len).sum();
    if npos == 0 {
        return Ok(None);
    }
    let mut taken: HashMap<u64, Vec<bool>> = gts_by_image
        .iter()
        .map(|(&id, g)| (id, vec![false; g.len()]))
        .collect();

    let order = matching::score_order(dets.iter().map(|d| d.score));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (pos, &i) in order.iter().enumerate() {
        let det = &dets[i];
        let hit = match gts_by_image.get(&det.image_id) {
            Some(image_gts) => {
                let flags = taken.get_mut(&det.image_id).expect("flags per image");
                matching::claim_best(&det.bbox, image_gts, flags, iou_thr).is_some()
            }
            None => false,
        };
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order
            .get(pos + 1)
            .is_none_or(|&next| dets[next].score != det.score);
        if last_of_tie {
            points.push(PrPoint {
                recall: tp as f64 / npos as f64,
                precision: tp as f64 / (tp + fp) as f64,
                score: det.score,
            });
        }
    }

    Ok(Some(ApResult {
        category_id,
        iou_threshold: iou_thr,
        ap: interpolated_ap(&points),
        points,
    }))
}

/// Mean of the monotone precision envelope sampled at 101 recall levels.
/// `points` must have non-decreasing recall.
pub fn interpolated_ap(points: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let total: f64 = (0..RECALL_SAMPLES)
        .map(|k| {
            let level = k as f64 / (RECALL_SAMPLES - 1) as f64;
            let idx = points.partition_point(|p| p.recall < level);
            envelope.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / RECALL_SAMPLES as f64
}

/// Mean AP over the retained categories.
pub fn mean_ap(aps: &[ApResult]) -> Result<f64, MetricsError> {
    if aps.is_empty() {
        return Err(MetricsError::Undefined);
    }
    Ok(aps.iter().map(|a| a.ap).sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub iou_threshold: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSuite {
    pub map50: f64,
    pub map75: f64,
    /// Mean over the ten thresholds .50:.05:.95.
    pub map: f64,
    pub per_threshold: Vec<ThresholdMap>,
    /// One entry per (threshold, category), threshold-major.
    pub per_class: Vec<ApResult>,
}

/// mAP at IoU .50, at .75 and averaged over .50:.95. Categories without
/// ground truth are skipped; detections of those categories are ignored.
pub fn map_suite(dets: &[Detection], gts: &[Annotation]) -> Result<MapSuite, MetricsError> {
    let mut gts_by_cat: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for g in gts.iter().filter(|g| !g.iscrowd) {
        gts_by_cat.entry(g.category_id).or_default().push(g.clone());
    }
    let mut dets_by_cat: HashMap<u64, Vec<Detection>> = HashMap::new();
    for d in dets {
        dets_by_cat.entry(d.category_id).or_default().push(d.clone());
    }

    let mut per_threshold = Vec::new();
    let mut per_class = Vec::new();
    for thr in iou_thresholds() {
        let mut aps = Vec::new();
        for (cat, cat_gts) in &gts_by_cat {
            let cat_dets = dets_by_cat.get(cat).map(Vec::as_slice).unwrap_or(&[]);
            if let Some(ap) = average_precision(cat_dets, cat_gts, thr)? {
                aps.push(ap);
            }
        }
        per_threshold.push(ThresholdMap {
            iou_threshold: thr,
            map: mean_ap(&aps)?,
        });
        per_class.extend(aps);
    }
    let map = per_threshold.iter().map(|t| t.map).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapSuite {
        map50: per_threshold[0].map,
        map75: per_threshold[5].map,
        map,
        per_threshold,
        per_class,
    })
}

// ---------------------------------------------------------------------------
// Reports

/// Operating point for precision / recall / F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: String,
    pub dataset: String,
    pub fold: Option<usize>,
    pub training_time_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub category_id: u64,
    pub name: String,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub params: EvalParams,
    /// Micro-averaged (pooled counts over categories).
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub map50: f64,
    pub map75: f64,
    pub map: f64,
    pub counts: ConfusionCounts,
    /// Categories with ground truth, in category-declaration order.
    pub per_class: Vec<ClassMetrics>,
}

/// Full metric suite for detections against `gt`. Detections on images
/// that are not part of `gt` are ignored.
pub fn evaluate(
    gt: &Dataset,
    dets: &[Detection],
    params: EvalParams,
    meta: ReportMeta,
) -> Result<MetricsReport, MetricsError> {
    let image_ids: HashSet<u64> = gt.images.iter().map(|i| i.id).collect();
    let dets: Vec<Detection> = dets
        .iter()
        .filter(|d| image_ids.contains(&d.image_id))
        .cloned()
        .collect();

    let suite = map_suite(&dets, &gt.annotations)?;
    let matches = matching::match_dataset(gt, &dets, params.iou_threshold, params.score_threshold);
    let by_cat = matching::per_category_counts(&matches);
    let counts: ConfusionCounts = by_cat.values().copied().sum();

    let scored: BTreeSet<u64> = suite.per_class.iter().map(|a| a.category_id).collect();
    let ap_at = |cat: u64, thr: f64| {
        suite
            .per_class
            .iter()
            .find(|a| a.category_id == cat && a.iou_threshold == thr)
            .map_or(0.0, |a| a.ap)
    };
    let thresholds = iou_thresholds();
    let per_class: Vec<ClassMetrics> = gt
        .categories
        .iter()
        .filter(|c| scored.contains(&c.id))
        .map(|c| {
            let cc = by_cat.get(&c.id).copied().unwrap_or_default();
            let (p, r) = (precision(&cc), recall(&cc));
            ClassMetrics {
                category_id: c.id,
                name: c.name.clone(),
                counts: cc,
                precision: p,
                recall: r,
                f1: f1(p, r),
                ap50: ap_at(c.id, thresholds[0]),
                ap75: ap_at(c.id, thresholds[5]),
                ap: thresholds.iter().map(|&t| ap_at(c.id, t)).sum::<f64>() / thresholds.len() as f64,
            }
        })
        .collect();

    let n = per_class.len().max(1) as f64;
    let (p, r) = (precision(&counts), recall(&counts));
    Ok(MetricsReport {
        meta,
        params,
        precision: p,
        recall: r,
        f1: f1(p, r),
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / n,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / n,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / n,
        map50: suite.map50,
        map75: suite.map75,
        map: suite.map,
        counts,
        per_class,
    })
}

/// Renders a ratio as a percentage with two decimals.
pub fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

// ---------------------------------------------------------------------------
// Fold aggregation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single fold.
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        // centred on the first value so identical folds reproduce it exactly
        let origin = values.first().copied().unwrap_or(0.0);
        let mean = origin + values.iter().map(|v| v - origin).sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub model: String,
    pub dataset: String,
    pub folds: Vec<Option<usize>>,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    /// Mean of the per-fold F1 values.
    pub f1: MetricSummary,
    /// F1 recomputed from the mean precision and mean recall.
    pub f1_of_means: f64,
    pub macro_f1: MetricSummary,
    pub map50: MetricSummary,
    pub map75: MetricSummary,
    pub map: MetricSummary,
    pub counts: ConfusionCounts,
    pub training_time_seconds: Option<MetricSummary>,
}

/// Mean and sample standard deviation of every metric across folds.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<AggregateReport, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NoReports)?;
    for r in reports {
        if r.meta.model != first.meta.model || r.meta.dataset != first.meta.dataset {
            return Err(MetricsError::MixedLabels(format!(
                "{}/{} vs {}/{}",
                first.meta.model, first.meta.dataset, r.meta.model, r.meta.dataset
            )));
        }
    }
    let summary = |f: fn(&MetricsReport) -> f64| MetricSummary::from_values(reports.iter().map(f).collect());
    let precision = summary(|r| r.precision);
    let recall = summary(|r| r.recall);
    let times: Option<Vec<f64>> = reports.iter().map(|r| r.meta.training_time_seconds).collect();
    Ok(AggregateReport {
        model: first.meta.model.clone(),
        dataset: first.meta.dataset.clone(),
        folds: reports.iter().map(|r| r.meta.fold).collect(),
        f1_of_means: f1(precision.mean, recall.mean),
        precision,
        recall,
        f1: summary(|r| r.f1),
        macro_f1: summary(|r| r.macro_f1),
        map50: summary(|r| r.map50),
        map75: summary(|r| r.map75),
        map: summary(|r| r.map),
        counts: reports.iter().map(|r| r.counts).sum(),
        training_time_seconds: times.map(MetricSummary::from_values),
    })
}
