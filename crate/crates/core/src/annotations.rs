//! COCO-style detection datasets: data model, parsing, validation and summary
//! statistics.
//!
//! Boxes follow the COCO convention `[x, y, width, height]` with a top-left
//! origin in continuous pixel coordinates. Parsing keeps every record exactly
//! as written; problems that do not prevent building a [`Dataset`] (boxes out
//! of bounds, stale `area` values, duplicate ids) are reported by
//! [`validate`] instead of failing the parse.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

/// Relative tolerance between a stated `area` and `w * h`.
pub const AREA_REL_TOLERANCE: f64 = 0.005;

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{location}: missing required field `{field}`")]
    MissingField { location: String, field: String },
    #[error("{location}: field `{field}` {problem}")]
    InvalidField {
        location: String,
        field: String,
        problem: String,
    },
    #[error("dangling references: {}", join_refs(.0))]
    Integrity(Vec<DanglingRef>),
}

fn join_refs(refs: &[DanglingRef]) -> String {
    refs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

/// A record that points at an image or category id that does not exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DanglingRef {
    /// Which list the offending record lives in (`annotations` or `detections`).
    pub section: &'static str,
    pub index: usize,
    pub field: &'static str,
    pub target_id: u64,
}

impl fmt::Display for DanglingRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}[{}].{} = {}",
            self.section, self.index, self.field, self.target_id
        )
    }
}

/// Axis-aligned box, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(from = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Zero or negative extent along either axis.
    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0)
    }

    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self::new(x, y, w, h)
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(4))?;
        for v in self.to_array() {
            seq.serialize_element(&v)?;
        }
        seq.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BoundingBox,
    pub area: f64,
    #[serde(serialize_with = "serialize_flag")]
    pub iscrowd: bool,
}

fn serialize_flag<S: Serializer>(flag: &bool, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.serialize_u8(u8::from(*flag))
}

impl Annotation {
    /// Builds a non-crowd annotation whose `area` is the box area.
    pub fn new(id: u64, image_id: u64, category_id: u64, bbox: BoundingBox) -> Self {
        Self {
            id,
            image_id,
            category_id,
            bbox,
            area: bbox.area(),
            iscrowd: false,
        }
    }
}

/// A scored model prediction in COCO results format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn from_json_str(text: &str) -> Result<Self, AnnotationError> {
        let root = parse_json(text)?;
        let root = expect_object(&root, "$")?;

        let images = required_array(root, "$", "images")?
            .iter()
            .enumerate()
            .map(|(i, v)| parse_image(v, &format!("images[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let categories = required_array(root, "$", "categories")?
            .iter()
            .enumerate()
            .map(|(i, v)| parse_category(v, &format!("categories[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let annotations = required_array(root, "$", "annotations")?
            .iter()
            .enumerate()
            .map(|(i, v)| parse_annotation(v, &format!("annotations[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;

        let ds = Dataset {
            images,
            annotations,
            categories,
        };
        let dangling = ds.dangling_refs();
        if dangling.is_empty() {
            Ok(ds)
        } else {
            Err(AnnotationError::Integrity(dangling))
        }
    }

    /// Canonical JSON encoding; parsing it back yields an identical dataset.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serialization is infallible")
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|img| img.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.images.iter().map(|img| img.id).collect()
    }

    /// Annotations grouped by image id, in input order.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut out: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for ann in &self.annotations {
            out.entry(ann.image_id).or_default().push(ann);
        }
        out
    }

    /// The sub-dataset made of the given images and their annotations.
    /// Categories are kept in full so class lists stay comparable across folds.
    pub fn restrict_to_images(&self, ids: &HashSet<u64>) -> Dataset {
        Dataset {
            images: self
                .images
                .iter()
                .filter(|img| ids.contains(&img.id))
                .cloned()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
        }
    }

    fn dangling_refs(&self) -> Vec<DanglingRef> {
        let image_ids: HashSet<u64> = self.images.iter().map(|i| i.id).collect();
        let category_ids: HashSet<u64> = self.categories.iter().map(|c| c.id).collect();
        let mut out = Vec::new();
        for (index, ann) in self.annotations.iter().enumerate() {
            if !image_ids.contains(&ann.image_id) {
                out.push(DanglingRef {
                    section: "annotations",
                    index,
                    field: "image_id",
                    target_id: ann.image_id,
                });
            }
            if !category_ids.contains(&ann.category_id) {
                out.push(DanglingRef {
                    section: "annotations",
                    index,
                    field: "category_id",
                    target_id: ann.category_id,
                });
            }
        }
        out
    }
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Dataset, AnnotationError> {
    Dataset::from_json_str(&read_text(path.as_ref())?)
}

/// Reads a COCO results file (a JSON array of detections).
pub fn parse_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>, AnnotationError> {
    parse_detections_str(&read_text(path.as_ref())?)
}

pub fn parse_detections_str(text: &str) -> Result<Vec<Detection>, AnnotationError> {
    let root = parse_json(text)?;
    let items = root.as_array().ok_or_else(|| AnnotationError::InvalidField {
        location: "$".into(),
        field: "$".into(),
        problem: "must be an array of detections".into(),
    })?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| parse_detection(v, &format!("[{i}]")))
        .collect()
}

/// Checks that every detection points at an image and category of `ds`.
pub fn check_detection_refs(ds: &Dataset, dets: &[Detection]) -> Result<(), AnnotationError> {
    let image_ids: HashSet<u64> = ds.images.iter().map(|i| i.id).collect();
    let category_ids: HashSet<u64> = ds.categories.iter().map(|c| c.id).collect();
    let mut dangling = Vec::new();
    for (index, det) in dets.iter().enumerate() {
        if !image_ids.contains(&det.image_id) {
            dangling.push(DanglingRef {
                section: "detections",
                index,
                field: "image_id",
                target_id: det.image_id,
            });
        }
        if !category_ids.contains(&det.category_id) {
            dangling.push(DanglingRef {
                section: "detections",
                index,
                field: "category_id",
                target_id: det.category_id,
            });
        }
    }
    if dangling.is_empty() {
        Ok(())
    } else {
        Err(AnnotationError::Integrity(dangling))
    }
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    serde_json::to_string_pretty(dets).expect("detection serialization is infallible")
}

fn read_text(path: &Path) -> Result<String, AnnotationError> {
    std::fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json(text: &str) -> Result<Value, AnnotationError> {
    serde_json::from_str(text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        AnnotationError::Parse {
            offset: byte_offset(text, line, column),
            line,
            column,
            message: e.to_string(),
        }
    })
}

/// Converts serde_json's 1-based (line, byte column) into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn expect_object<'a>(v: &'a Value, location: &str) -> Result<&'a Map<String, Value>, AnnotationError> {
    v.as_object().ok_or_else(|| AnnotationError::InvalidField {
        location: location.into(),
        field: location.rsplit('.').next().unwrap_or(location).into(),
        problem: "must be an object".into(),
    })
}

fn required<'a>(obj: &'a Map<String, Value>, location: &str, field: &str) -> Result<&'a Value, AnnotationError> {
    obj.get(field).ok_or_else(|| AnnotationError::MissingField {
        location: location.into(),
        field: field.into(),
    })
}

fn invalid(location: &str, field: &str, problem: &str) -> AnnotationError {
    AnnotationError::InvalidField {
        location: location.into(),
        field: field.into(),
        problem: problem.into(),
    }
}

fn required_array<'a>(obj: &'a Map<String, Value>, location: &str, field: &str) -> Result<&'a Vec<Value>, AnnotationError> {
    required(obj, location, field)?
        .as_array()
        .ok_or_else(|| invalid(location, field, "must be an array"))
}

fn required_id(obj: &Map<String, Value>, location: &str, field: &str) -> Result<u64, AnnotationError> {
    required(obj, location, field)?
        .as_u64()
        .ok_or_else(|| invalid(location, field, "must be a non-negative integer"))
}

fn required_number(obj: &Map<String, Value>, location: &str, field: &str) -> Result<f64, AnnotationError> {
    required(obj, location, field)?
        .as_f64()
        .ok_or_else(|| invalid(location, field, "must be a number"))
}

fn required_u32(obj: &Map<String, Value>, location: &str, field: &str) -> Result<u32, AnnotationError> {
    required(obj, location, field)?
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| invalid(location, field, "must be a non-negative 32-bit integer"))
}

fn required_bbox(obj: &Map<String, Value>, location: &str) -> Result<BoundingBox, AnnotationError> {
    let arr = required(obj, location, "bbox")?
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| invalid(location, "bbox", "must be a 4-element array [x, y, w, h]"))?;
    let mut v = [0.0; 4];
    for (slot, item) in v.iter_mut().zip(arr) {
        *slot = item
            .as_f64()
            .ok_or_else(|| invalid(location, "bbox", "must contain only numbers"))?;
    }
    Ok(BoundingBox::from(v))
}

fn parse_image(v: &Value, location: &str) -> Result<ImageRecord, AnnotationError> {
    let obj = expect_object(v, location)?;
    Ok(ImageRecord {
        id: required_id(obj, location, "id")?,
        file_name: required(obj, location, "file_name")?
            .as_str()
            .ok_or_else(|| invalid(location, "file_name", "must be a string"))?
            .to_owned(),
        width: required_u32(obj, location, "width")?,
        height: required_u32(obj, location, "height")?,
    })
}

fn parse_category(v: &Value, location: &str) -> Result<Category, AnnotationError> {
    let obj = expect_object(v, location)?;
    Ok(Category {
        id: required_id(obj, location, "id")?,
        name: required(obj, location, "name")?
            .as_str()
            .ok_or_else(|| invalid(location, "name", "must be a string"))?
            .to_owned(),
    })
}

fn parse_annotation(v: &Value, location: &str) -> Result<Annotation, AnnotationError> {
    let obj = expect_object(v, location)?;
    let bbox = required_bbox(obj, location)?;
    let area = match obj.get("area") {
        None | Some(Value::Null) => bbox.area(),
        Some(a) => a
            .as_f64()
            .ok_or_else(|| invalid(location, "area", "must be a number"))?,
    };
    let iscrowd = match obj.get("iscrowd") {
        None | Some(Value::Null) => false,
        Some(flag) => match flag.as_u64() {
            Some(0) => false,
            Some(1) => true,
            _ => return Err(invalid(location, "iscrowd", "must be 0 or 1")),
        },
    };
    Ok(Annotation {
        id: required_id(obj, location, "id")?,
        image_id: required_id(obj, location, "image_id")?,
        category_id: required_id(obj, location, "category_id")?,
        bbox,
        area,
        iscrowd,
    })
}

fn parse_detection(v: &Value, location: &str) -> Result<Detection, AnnotationError> {
    let obj = expect_object(v, location)?;
    let score = required_number(obj, location, "score")?;
    if !(0.0..=1.0).contains(&score) {
        return Err(invalid(location, "score", "must lie in [0, 1]"));
    }
    Ok(Detection {
        image_id: required_id(obj, location, "image_id")?,
        category_id: required_id(obj, location, "category_id")?,
        bbox: required_bbox(obj, location)?,
        score,
    })
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Images,
    Categories,
    Annotations,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Images => "images",
            Section::Categories => "categories",
            Section::Annotations => "annotations",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FindingKind {
    DuplicateId { id: u64 },
    EmptyCategoryName { id: u64 },
    NonPositiveImageSize { id: u64, width: u32, height: u32 },
    DanglingImage { annotation_id: u64, image_id: u64 },
    DanglingCategory { annotation_id: u64, category_id: u64 },
    NonFiniteBox { annotation_id: u64 },
    DegenerateBox { annotation_id: u64, bbox: BoundingBox },
    OutOfBounds { annotation_id: u64, image_id: u64, bbox: BoundingBox, width: u32, height: u32 },
    AreaMismatch { annotation_id: u64, stated: f64, computed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub section: Section,
    pub index: usize,
    #[serde(flatten)]
    pub kind: FindingKind,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]: ", self.section, self.index)?;
        match &self.kind {
            FindingKind::DuplicateId { id } => write!(f, "duplicate id {id}"),
            FindingKind::EmptyCategoryName { id } => write!(f, "category {id} has an empty name"),
            FindingKind::NonPositiveImageSize { id, width, height } => {
                write!(f, "image {id} has non-positive size {width}x{height}")
            }
            FindingKind::DanglingImage { annotation_id, image_id } => {
                write!(f, "annotation {annotation_id} references missing image {image_id}")
            }
            FindingKind::DanglingCategory { annotation_id, category_id } => {
                write!(f, "annotation {annotation_id} references missing category {category_id}")
            }
            FindingKind::NonFiniteBox { annotation_id } => {
                write!(f, "annotation {annotation_id} has a non-finite box")
            }
            FindingKind::DegenerateBox { annotation_id, bbox } => {
                write!(f, "annotation {annotation_id} has degenerate box {:?}", bbox.to_array())
            }
            FindingKind::OutOfBounds { annotation_id, image_id, bbox, width, height } => write!(
                f,
                "annotation {annotation_id} box {:?} exceeds image {image_id} ({width}x{height})",
                bbox.to_array()
            ),
            FindingKind::AreaMismatch { annotation_id, stated, computed } => write!(
                f,
                "annotation {annotation_id} area {stated} differs from w*h = {computed}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn len(&self) -> usize {
        self.findings.len()
    }

    pub fn count_where(&self, pred: impl Fn(&FindingKind) -> bool) -> usize {
        self.findings.iter().filter(|f| pred(&f.kind)).count()
    }
}

/// Lists every invariant violation in `ds`. Never fails.
pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |section, index, kind| findings.push(Finding { section, index, kind });

    let mut images: HashMap<u64, &ImageRecord> = HashMap::new();
    for (index, img) in ds.images.iter().enumerate() {
        if images.insert(img.id, img).is_some() {
            push(Section::Images, index, FindingKind::DuplicateId { id: img.id });
        }
        if img.width == 0 || img.height == 0 {
            push(
                Section::Images,
                index,
                FindingKind::NonPositiveImageSize { id: img.id, width: img.width, height: img.height },
            );
        }
    }

    let mut categories = HashSet::new();
    for (index, cat) in ds.categories.iter().enumerate() {
        if !categories.insert(cat.id) {
            push(Section::Categories, index, FindingKind::DuplicateId { id: cat.id });
        }
        if cat.name.is_empty() {
            push(Section::Categories, index, FindingKind::EmptyCategoryName { id: cat.id });
        }
    }

    let mut annotation_ids = HashSet::new();
    for (index, ann) in ds.annotations.iter().enumerate() {
        let mut flag = |kind| push(Section::Annotations, index, kind);
        if !annotation_ids.insert(ann.id) {
            flag(FindingKind::DuplicateId { id: ann.id });
        }
        if !categories.contains(&ann.category_id) {
            flag(FindingKind::DanglingCategory {
                annotation_id: ann.id,
                category_id: ann.category_id,
            });
        }
        let image = images.get(&ann.image_id);
        if image.is_none() {
            flag(FindingKind::DanglingImage { annotation_id: ann.id, image_id: ann.image_id });
        }
        if !ann.bbox.is_finite() {
            flag(FindingKind::NonFiniteBox { annotation_id: ann.id });
            continue;
        }
        if ann.bbox.is_degenerate() {
            flag(FindingKind::DegenerateBox { annotation_id: ann.id, bbox: ann.bbox });
        } else {
            let computed = ann.bbox.area();
            let within = (ann.area - computed).abs() <= AREA_REL_TOLERANCE * computed;
            if !within {
                flag(FindingKind::AreaMismatch { annotation_id: ann.id, stated: ann.area, computed });
            }
        }
        if let Some(img) = image {
            if !ann.bbox.fits_within(f64::from(img.width), f64::from(img.height)) {
                flag(FindingKind::OutOfBounds {
                    annotation_id: ann.id,
                    image_id: img.id,
                    bbox: ann.bbox,
                    width: img.width,
                    height: img.height,
                });
            }
        }
    }

    ValidationReport { findings }
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryCount {
    pub category_id: u64,
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AreaSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub image_count: usize,
    pub annotation_count: usize,
    /// In category declaration order.
    pub per_category: Vec<CategoryCount>,
    /// boxes in an image -> number of images with that many boxes.
    pub boxes_per_image: BTreeMap<usize, usize>,
    /// `None` for a dataset without annotations.
    pub box_area: Option<AreaSummary>,
}

impl DatasetStats {
    pub fn count_for(&self, name: &str) -> Option<usize> {
        self.per_category
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.count)
    }
}

/// Summary statistics. Assumes referential integrity holds.
pub fn stats(ds: &Dataset) -> DatasetStats {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for ann in &ds.annotations {
        *counts.entry(ann.category_id).or_default() += 1;
    }
    let per_category = ds
        .categories
        .iter()
        .map(|c| CategoryCount {
            category_id: c.id,
            name: c.name.clone(),
            count: counts.get(&c.id).copied().unwrap_or(0),
        })
        .collect();

    let mut boxes_per_image = BTreeMap::new();
    for n in per_image_counts(ds).into_iter().map(|(_, n)| n) {
        *boxes_per_image.entry(n).or_default() += 1;
    }

    let mut areas: Vec<f64> = ds.annotations.iter().map(|a| a.bbox.area()).collect();
    areas.sort_by(f64::total_cmp);
    let box_area = (!areas.is_empty()).then(|| {
        let mid = areas.len() / 2;
        let median = if areas.len() % 2 == 1 {
            areas[mid]
        } else {
            0.5 * (areas[mid - 1] + areas[mid])
        };
        AreaSummary {
            min: areas[0],
            median,
            max: areas[areas.len() - 1],
        }
    });

    DatasetStats {
        image_count: ds.images.len(),
        annotation_count: ds.annotations.len(),
        per_category,
        boxes_per_image,
        box_area,
    }
}

/// `(image_id, annotation count)` for every image, in image order.
pub fn per_image_counts(ds: &Dataset) -> Vec<(u64, usize)> {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for ann in &ds.annotations {
        *counts.entry(ann.image_id).or_default() += 1;
    }
    ds.images
        .iter()
        .map(|img| (img.id, counts.get(&img.id).copied().unwrap_or(0)))
        .collect()
}
