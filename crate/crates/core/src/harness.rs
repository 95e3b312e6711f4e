//! Benchmark runs over (model, dataset, fold) triples, loss-curve
//! processing and report files.
//!
//! A run reads one annotation file and fold plan per dataset and one
//! detections file per (model, fold), found through a path template with
//! `{model}` and `{fold}` placeholders. Each fold is scored on its test
//! images only and folds are then aggregated. Absent detection files become
//! gap entries. Results are ordered by the config's dataset and model lists
//! and by fold, so identical inputs give byte-identical files.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotations::{self, AnnotationError};
use crate::metrics::{self, AggregateReport, EvalParams, MetricSummary, MetricsError, MetricsReport, ReportMeta};
use crate::split::{FoldPlan, SplitError};

/// Epoch count of the reference training protocol. Other lengths only warn.
pub const EXPECTED_EPOCHS: usize = 12;

pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Annotations(#[from] AnnotationError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    LossFormat { path: PathBuf, message: String },
    #[error("{series}: missing epoch {epoch}")]
    MissingEpoch { series: String, epoch: u32 },
    #[error("{series}: epoch {epoch} appears more than once")]
    DuplicateEpoch { series: String, epoch: u32 },
    #[error("{series}: {message}")]
    LossDomain { series: String, message: String },
    #[error("fold restriction violated for {0}")]
    FoldLeak(String),
    #[error("malformed report {path}: {message}")]
    Report { path: PathBuf, message: String },
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit status: 2 for configuration and file-access problems,
    /// 1 for integrity and domain failures in the data.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } => 2,
            HarnessError::Annotations(AnnotationError::Io { .. }) => 2,
            HarnessError::Split(SplitError::Io { .. } | SplitError::TooFewFolds(_)) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Label used in reports and file names.
    pub name: String,
    pub annotations: PathBuf,
    pub plan: PathBuf,
    /// Detections path with `{model}` and `{fold}` placeholders.
    pub detections: String,
}

/// Externally measured training time, copied into reports unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingTime {
    pub model: String,
    pub dataset: String,
    /// Applies to every fold when absent.
    #[serde(default)]
    pub fold: Option<usize>,
    pub seconds: f64,
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub datasets: Vec<DatasetConfig>,
    pub models: Vec<String>,
    #[serde(default = "default_threshold")]
    pub iou_threshold: f64,
    #[serde(default = "default_threshold")]
    pub score_threshold: f64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub training_times: Vec<TrainingTime>,
    /// Optional loss log processed alongside the metrics.
    #[serde(default)]
    pub losses: Option<PathBuf>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: impl AsRef<Path>) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn params(&self) -> EvalParams {
        EvalParams { iou_threshold: self.iou_threshold, score_threshold: self.score_threshold }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.models.is_empty() || self.datasets.is_empty() {
            return fail("at least one model and one dataset are required".into());
        }
        let names_ok = |names: Vec<&String>, what: &str| -> Result<()> {
            let mut seen = BTreeSet::new();
            for n in names {
                if n.is_empty() || n.contains(['/', '\\']) || n.chars().any(char::is_control) {
                    return fail(format!("{what} name {n:?} must be non-empty and free of path separators"));
                }
                if !seen.insert(n) {
                    return fail(format!("{what} {n:?} is declared twice"));
                }
            }
            Ok(())
        };
        names_ok(self.models.iter().collect(), "model")?;
        names_ok(self.datasets.iter().map(|d| &d.name).collect(), "dataset")?;
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return fail(format!("iou_threshold {} must lie in (0, 1]", self.iou_threshold));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return fail(format!("score_threshold {} must lie in [0, 1]", self.score_threshold));
        }
        for d in &self.datasets {
            check_template(&d.detections, self.models.len() > 1)?;
        }
        for t in &self.training_times {
            if !self.models.contains(&t.model) || !self.datasets.iter().any(|d| d.name == t.dataset) {
                return fail(format!("training time for undeclared pair {}/{}", t.model, t.dataset));
            }
            if !(t.seconds.is_finite() && t.seconds >= 0.0) {
                return fail(format!("training time {} for {}/{} is not a duration", t.seconds, t.model, t.dataset));
            }
        }
        Ok(())
    }

    fn training_time(&self, model: &str, dataset: &str, fold: usize) -> Option<f64> {
        let matching = |t: &&TrainingTime| t.model == model && t.dataset == dataset;
        let times = || self.training_times.iter().filter(matching);
        times().find(|t| t.fold == Some(fold)).or_else(|| times().find(|t| t.fold.is_none())).map(|t| t.seconds)
    }
}

fn placeholders(template: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| HarnessError::Config(format!("unclosed placeholder in {template:?}")))?;
        out.push(&rest[start + 1..start + end]);
        rest = &rest[start + end + 1..];
    }
    if rest.contains('}') {
        return Err(HarnessError::Config(format!("unmatched '}}' in {template:?}")));
    }
    Ok(out)
}

fn check_template(template: &str, needs_model: bool) -> Result<()> {
    let found = placeholders(template)?;
    if let Some(bad) = found.iter().find(|p| !matches!(**p, "model" | "fold")) {
        return Err(HarnessError::Config(format!("unknown placeholder {{{bad}}} in {template:?}")));
    }
    if !found.contains(&"fold") || (needs_model && !found.contains(&"model")) {
        return Err(HarnessError::Config(format!(
            "template {template:?} must contain {{fold}}{} to name one file per run",
            if needs_model { " and {model}" } else { "" }
        )));
    }
    Ok(())
}

/// Substitutes `{model}` and `{fold}`.
pub fn expand_template(template: &str, model: &str, fold: usize) -> Result<String> {
    placeholders(template)?;
    Ok(template.replace("{model}", model).replace("{fold}", &fold.to_string()))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub name: String,
    pub annotations: PathBuf,
    pub plan_checksum: String,
    pub k: usize,
    pub plan_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub datasets: Vec<DatasetProvenance>,
}

/// A declared (model, dataset, fold) whose detections file was absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub model: String,
    pub dataset: String,
    pub fold: usize,
    pub path: String,
}

/// What one fold evaluation actually consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub model: String,
    pub dataset: String,
    pub fold: usize,
    pub test_images: usize,
    pub ground_truths: usize,
    pub evaluated_detections: usize,
    /// Detections on images outside the test fold.
    pub dropped_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub dataset: String,
    pub evaluated_folds: Vec<usize>,
    pub missing_folds: Vec<usize>,
    /// Absent when no fold could be evaluated.
    pub aggregate: Option<AggregateReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub provenance: Provenance,
    /// Dataset-major, then model, in config order.
    pub results: Vec<ModelResult>,
    pub folds: Vec<MetricsReport>,
    pub gaps: Vec<Gap>,
    pub audits: Vec<FoldAudit>,
    pub losses: Option<LossCurves>,
    pub warnings: Vec<String>,
}

impl BenchmarkReport {
    pub fn empty() -> Self {
        BenchmarkReport {
            provenance: Provenance { seed: 0, iou_threshold: 0.5, score_threshold: 0.5, datasets: Vec::new() },
            results: Vec::new(),
            folds: Vec::new(),
            gaps: Vec::new(),
            audits: Vec::new(),
            losses: None,
            warnings: Vec::new(),
        }
    }

    pub fn result(&self, dataset: &str, model: &str) -> Option<&ModelResult> {
        self.results.iter().find(|r| r.dataset == dataset && r.model == model)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(REPORT_JSON);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Report { path, message: e.to_string() })
    }
}

/// Scores every declared (model, fold) of every dataset on the fold's test
/// images and aggregates per (model, dataset).
pub fn run_evaluation(cfg: &RunConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let mut report = BenchmarkReport::empty();
    report.provenance.seed = cfg.seed;
    report.provenance.iou_threshold = cfg.iou_threshold;
    report.provenance.score_threshold = cfg.score_threshold;

    for dcfg in &cfg.datasets {
        let ds = annotations::parse_dataset(cfg.resolve(&dcfg.annotations))?;
        let plan = FoldPlan::load(cfg.resolve(&dcfg.plan))?;
        plan.verify(&ds)?;
        report.provenance.datasets.push(DatasetProvenance {
            name: dcfg.name.clone(),
            annotations: dcfg.annotations.clone(),
            plan_checksum: plan.dataset_checksum.clone(),
            k: plan.k,
            plan_seed: plan.seed,
        });
        let test_sets: Vec<HashSet<u64>> = (0..plan.k).map(|f| plan.fold_images(f).into_iter().collect()).collect();

        for model in &cfg.models {
            let mut fold_reports = Vec::new();
            let mut result = ModelResult {
                model: model.clone(),
                dataset: dcfg.name.clone(),
                evaluated_folds: Vec::new(),
                missing_folds: Vec::new(),
                aggregate: None,
            };
            for (fold, test_ids) in test_sets.iter().enumerate() {
                let rel = expand_template(&dcfg.detections, model, fold)?;
                let path = cfg.resolve(&rel);
                if !path.is_file() {
                    log::warn!("{model}/{}: no detections for fold {fold} at {}", dcfg.name, path.display());
                    report.gaps.push(Gap { model: model.clone(), dataset: dcfg.name.clone(), fold, path: rel });
                    result.missing_folds.push(fold);
                    continue;
                }
                let dets = annotations::parse_detections(&path)?;
                annotations::check_detection_refs(&ds, &dets)?;
                let gt = ds.restrict_to_images(test_ids);
                let (kept, dropped): (Vec<_>, Vec<_>) = dets.into_iter().partition(|d| test_ids.contains(&d.image_id));

                let label = || format!("{model}/{}/fold {fold}", dcfg.name);
                let gt_ids: HashSet<u64> = gt.images.iter().map(|i| i.id).collect();
                if &gt_ids != test_ids || gt.annotations.iter().any(|a| !test_ids.contains(&a.image_id)) {
                    return Err(HarnessError::FoldLeak(label()));
                }
                report.audits.push(FoldAudit {
                    model: model.clone(),
                    dataset: dcfg.name.clone(),
                    fold,
                    test_images: gt.images.len(),
                    ground_truths: gt.annotations.len(),
                    evaluated_detections: kept.len(),
                    dropped_detections: dropped.len(),
                });
                let meta = ReportMeta {
                    model: model.clone(),
                    dataset: dcfg.name.clone(),
                    fold: Some(fold),
                    training_time_seconds: cfg.training_time(model, &dcfg.name, fold),
                };
                fold_reports.push(metrics::evaluate(&gt, &kept, cfg.params(), meta)?);
                result.evaluated_folds.push(fold);
            }
            if !fold_reports.is_empty() {
                result.aggregate = Some(metrics::aggregate_folds(&fold_reports)?);
            }
            report.folds.extend(fold_reports);
            report.results.push(result);
        }
    }

    if let Some(loss_path) = &cfg.losses {
        let log = ingest_loss_log(cfg.resolve(loss_path))?;
        report.warnings.extend(log.warnings.iter().cloned());
        report.losses = Some(normalize_and_combine_losses(&log));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Loss logs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub model: String,
    pub dataset: String,
    pub epoch: u32,
    pub loss_cls: f64,
    pub loss_reg: f64,
    /// Free-form tag such as `train` or `val`.
    #[serde(default)]
    pub split: Option<String>,
}

impl LossRecord {
    pub fn combined(&self) -> f64 {
        self.loss_cls + self.loss_reg
    }
}

/// Records of one (model, dataset, split), sorted by epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSeries {
    pub model: String,
    pub dataset: String,
    pub split: Option<String>,
    pub records: Vec<LossRecord>,
}

impl LossSeries {
    fn label(&self) -> String {
        series_label(&self.model, &self.dataset, self.split.as_deref())
    }
}

fn series_label(model: &str, dataset: &str, split: Option<&str>) -> String {
    match split {
        Some(s) => format!("{model}/{dataset} ({s})"),
        None => format!("{model}/{dataset}"),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    /// Sorted by (model, dataset, split).
    pub series: Vec<LossSeries>,
    pub warnings: Vec<String>,
}

impl LossLog {
    pub fn records(&self) -> impl Iterator<Item = &LossRecord> {
        self.series.iter().flat_map(|s| &s.records)
    }

    pub fn len(&self) -> usize {
        self.series.iter().map(|s| s.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

pub fn ingest_loss_log(path: impl AsRef<Path>) -> Result<LossLog> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_loss_log(&text).map_err(|e| match e {
        HarnessError::LossFormat { message, .. } => HarnessError::LossFormat { path: path.to_path_buf(), message },
        other => other,
    })
}

/// Parses `model,dataset,epoch,loss_cls,loss_reg[,split]` CSV text. Columns
/// may appear in any order.
pub fn parse_loss_log(text: &str) -> Result<LossLog> {
    let format_err = |message: String| HarnessError::LossFormat { path: PathBuf::from("<input>"), message };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut grouped: BTreeMap<(String, String, Option<String>), Vec<LossRecord>> = BTreeMap::new();
    for row in reader.deserialize::<LossRecord>() {
        let mut rec = row.map_err(|e| format_err(e.to_string()))?;
        rec.split = rec.split.filter(|s| !s.is_empty());
        let label = series_label(&rec.model, &rec.dataset, rec.split.as_deref());
        if rec.epoch == 0 {
            return Err(HarnessError::LossDomain { series: label, message: "epochs are numbered from 1".into() });
        }
        for (field, v) in [("loss_cls", rec.loss_cls), ("loss_reg", rec.loss_reg)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HarnessError::LossDomain {
                    series: label,
                    message: format!("epoch {}: {field} = {v} is not a non-negative loss", rec.epoch),
                });
            }
        }
        grouped.entry((rec.model.clone(), rec.dataset.clone(), rec.split.clone())).or_default().push(rec);
    }

    let mut log = LossLog::default();
    for ((model, dataset, split), mut records) in grouped {
        records.sort_by_key(|r| r.epoch);
        let series = LossSeries { model, dataset, split, records };
        for (expected, r) in (1u32..).zip(&series.records) {
            if r.epoch < expected {
                return Err(HarnessError::DuplicateEpoch { series: series.label(), epoch: r.epoch });
            }
            if r.epoch > expected {
                return Err(HarnessError::MissingEpoch { series: series.label(), epoch: expected });
            }
        }
        if series.records.len() != EXPECTED_EPOCHS {
            log.warnings.push(format!(
                "{}: {} epochs instead of {EXPECTED_EPOCHS}",
                series.label(),
                series.records.len()
            ));
        }
        log.series.push(series);
    }
    Ok(log)
}

/// Rescales to `[0, 1]` by the series' minimum and maximum. A constant
/// series maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSeries {
    pub model: String,
    pub dataset: String,
    pub split: Option<String>,
    /// Classification plus regression loss per epoch.
    pub combined: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Epoch-wise mean of one model's normalized series across datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub model: String,
    pub split: Option<String>,
    pub datasets: Vec<String>,
    pub values: Vec<f64>,
    /// Every epoch lower than the previous one; needs at least two epochs.
    pub strictly_decreasing: bool,
    pub notes: Vec<String>,
}

impl LossCurve {
    pub fn label(&self) -> String {
        match &self.split {
            Some(s) => format!("{} ({s})", self.model),
            None => self.model.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub series: Vec<NormalizedSeries>,
    /// Sorted by (model, split).
    pub curves: Vec<LossCurve>,
}

pub fn normalize_and_combine_losses(log: &LossLog) -> LossCurves {
    let series: Vec<NormalizedSeries> = log
        .series
        .iter()
        .map(|s| {
            let combined: Vec<f64> = s.records.iter().map(LossRecord::combined).collect();
            NormalizedSeries {
                model: s.model.clone(),
                dataset: s.dataset.clone(),
                split: s.split.clone(),
                normalized: min_max_normalize(&combined),
                combined,
            }
        })
        .collect();

    let mut by_model: BTreeMap<(&str, Option<&str>), Vec<&NormalizedSeries>> = BTreeMap::new();
    for s in &series {
        by_model.entry((&s.model, s.split.as_deref())).or_default().push(s);
    }
    let curves = by_model
        .into_iter()
        .map(|((model, split), members)| {
            let mut notes = Vec::new();
            let common = members.iter().map(|s| s.normalized.len()).min().unwrap_or(0);
            for s in &members {
                if s.normalized.len() > common {
                    notes.push(format!("{} truncated from {} to {common} epochs", s.dataset, s.normalized.len()));
                }
            }
            if members.len() == 1 {
                notes.push(format!("only {} available; curve is not averaged", members[0].dataset));
            }
            let values: Vec<f64> = (0..common)
                .map(|e| MetricSummary::from_values(members.iter().map(|s| s.normalized[e]).collect()).mean)
                .collect();
            LossCurve {
                model: model.to_string(),
                split: split.map(str::to_string),
                datasets: members.iter().map(|s| s.dataset.clone()).collect(),
                strictly_decreasing: values.len() >= 2 && values.windows(2).all(|w| w[1] < w[0]),
                values,
                notes,
            }
        })
        .collect();
    LossCurves { series, curves }
}

// ---------------------------------------------------------------------------
// Report files

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?} (expected csv or json)")),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

pub const TABLE_COLUMNS: [&str; 21] = [
    "model",
    "folds",
    "missing_folds",
    "precision",
    "precision_std",
    "recall",
    "recall_std",
    "f1",
    "f1_std",
    "f1_of_means",
    "macro_f1",
    "map50",
    "map50_std",
    "map75",
    "map75_std",
    "map",
    "map_std",
    "tp",
    "fp",
    "fn",
    "training_time_s",
];

pub const FOLD_COLUMNS: [&str; 14] = [
    "model",
    "dataset",
    "fold",
    "status",
    "precision",
    "recall",
    "f1",
    "map50",
    "map75",
    "map",
    "tp",
    "fp",
    "fn",
    "training_time_s",
];

pub const LOSS_FLAG_COLUMNS: [&str; 7] = ["curve", "model", "split", "datasets", "epochs", "strictly_decreasing", "notes"];

fn ratio(v: f64) -> String {
    format!("{v:.6}")
}

fn seconds(v: Option<f64>) -> String {
    v.map(|s| format!("{s:.2}")).unwrap_or_default()
}

fn join_folds(folds: &[usize]) -> String {
    folds.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn table_row(r: &ModelResult) -> Vec<String> {
    let mut row = vec![r.model.clone(), join_folds(&r.evaluated_folds), join_folds(&r.missing_folds)];
    match &r.aggregate {
        Some(a) => {
            for s in [&a.precision, &a.recall, &a.f1] {
                row.extend([ratio(s.mean), ratio(s.std)]);
            }
            row.extend([ratio(a.f1_of_means), ratio(a.macro_f1.mean)]);
            for s in [&a.map50, &a.map75, &a.map] {
                row.extend([ratio(s.mean), ratio(s.std)]);
            }
            row.extend([a.counts.tp.to_string(), a.counts.fp.to_string(), a.counts.fn_.to_string()]);
            row.push(seconds(a.training_time_seconds.as_ref().map(|t| t.mean)));
        }
        None => row.resize(TABLE_COLUMNS.len(), String::new()),
    }
    row
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// File name of a dataset's comparison table.
pub fn table_file_name(dataset: &str) -> String {
    format!("table_{dataset}.csv")
}

/// Renders every report file in memory, keyed by file name.
pub fn render_report(report: &BenchmarkReport, formats: &[ReportFormat]) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    if formats.contains(&ReportFormat::Csv) {
        for d in &report.provenance.datasets {
            let rows = report.results.iter().filter(|r| r.dataset == d.name).map(table_row);
            files.insert(table_file_name(&d.name), csv_bytes(&TABLE_COLUMNS, rows));
        }
        let summary_header: Vec<&str> = std::iter::once("dataset").chain(TABLE_COLUMNS).collect();
        let summary_rows = report.results.iter().map(|r| std::iter::once(r.dataset.clone()).chain(table_row(r)));
        files.insert("summary.csv".into(), csv_bytes(&summary_header, summary_rows));
        files.insert("folds.csv".into(), csv_bytes(&FOLD_COLUMNS, fold_rows(report)));
        let (curves, flags) = loss_tables(report.losses.as_ref());
        files.insert("loss_curves.csv".into(), curves);
        files.insert("loss_flags.csv".into(), flags);
    }
    if formats.contains(&ReportFormat::Json) {
        files.insert(REPORT_JSON.into(), report.to_json_string().into_bytes());
    }
    files
}

fn fold_rows(report: &BenchmarkReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in &report.results {
        let k = report.provenance.datasets.iter().find(|d| d.name == r.dataset).map_or(0, |d| d.k);
        for fold in 0..k {
            let mut row = vec![r.model.clone(), r.dataset.clone(), fold.to_string()];
            let found = report
                .folds
                .iter()
                .find(|f| f.meta.model == r.model && f.meta.dataset == r.dataset && f.meta.fold == Some(fold));
            match found {
                Some(f) => {
                    row.push("ok".into());
                    row.extend([f.precision, f.recall, f.f1, f.map50, f.map75, f.map].map(ratio));
                    row.extend([f.counts.tp, f.counts.fp, f.counts.fn_].map(|c| c.to_string()));
                    row.push(seconds(f.meta.training_time_seconds));
                }
                None => {
                    row.push("missing".into());
                    row.resize(FOLD_COLUMNS.len(), String::new());
                }
            }
            rows.push(row);
        }
    }
    rows
}

/// Wide epoch-by-curve table plus per-curve flags.
fn loss_tables(losses: Option<&LossCurves>) -> (Vec<u8>, Vec<u8>) {
    let curves = losses.map_or(&[][..], |l| &l.curves[..]);
    let labels: Vec<String> = curves.iter().map(LossCurve::label).collect();
    let header: Vec<&str> = std::iter::once("epoch").chain(labels.iter().map(String::as_str)).collect();
    let epochs = curves.iter().map(|c| c.values.len()).max().unwrap_or(0);
    let rows = (0..epochs).map(|e| {
        std::iter::once((e + 1).to_string())
            .chain(curves.iter().map(move |c| c.values.get(e).map(|v| ratio(*v)).unwrap_or_default()))
            .collect::<Vec<_>>()
    });
    let table = csv_bytes(&header, rows);
    let flags = csv_bytes(
        &LOSS_FLAG_COLUMNS,
        curves.iter().map(|c| {
            vec![
                c.label(),
                c.model.clone(),
                c.split.clone().unwrap_or_default(),
                c.datasets.join(";"),
                c.values.len().to_string(),
                c.strictly_decreasing.to_string(),
                c.notes.join("; "),
            ]
        }),
    );
    (table, flags)
}

/// Wide epoch-by-curve CSV of normalized losses.
pub fn loss_curves_csv(curves: &LossCurves) -> Vec<u8> {
    loss_tables(Some(curves)).0
}

/// Writes the report files into `out_dir`, creating it if needed, and
/// returns the written paths in name order.
pub fn emit_report(report: &BenchmarkReport, out_dir: impl AsRef<Path>, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for (name, bytes) in render_report(report, formats) {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
