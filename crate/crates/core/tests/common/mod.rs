//! Oracles and generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use detbench::annotations::{Annotation, BoundingBox, Category, Dataset, Detection, ImageRecord};
use detbench::split::{self, FoldPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// AP oracle

/// Integer box `[x, y, w, h]`.
pub type IBox = [i64; 4];

fn to_ibox(b: &BoundingBox) -> IBox {
    let ib = [b.x as i64, b.y as i64, b.w as i64, b.h as i64];
    assert_eq!(ib.map(|v| v as f64), [b.x, b.y, b.w, b.h], "oracle needs integer boxes");
    ib
}

/// Intersection and union areas, exact.
fn overlap(a: IBox, b: IBox) -> (i64, i64) {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0);
    let inter = iw * ih;
    (inter, a[2] * a[3] + b[2] * b[3] - inter)
}

/// `inter / union >= pct / 100` in integer arithmetic.
fn passes(inter: i64, union: i64, pct: i64) -> bool {
    union > 0 && inter * 100 >= pct * union
}

/// True positives among the detections scoring at least `cutoff`, with
/// greedy matching in descending score, ties by input order.
fn true_positives(dets: &[Detection], gts: &[Annotation], cutoff: f64, pct: i64) -> (usize, usize) {
    let mut kept: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= cutoff).collect();
    kept.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for &i in &kept {
        let d = to_ibox(&dets[i].bbox);
        let mut best: Option<(usize, i64, i64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image_id != dets[i].image_id {
                continue;
            }
            let (inter, union) = overlap(d, to_ibox(&g.bbox));
            if !passes(inter, union, pct) {
                continue;
            }
            // strictly larger IoU wins, first ground truth on ties
            let better = match best {
                None => true,
                Some((_, bi, bu)) => inter * bu > bi * union,
            };
            if better {
                best = Some((j, inter, union));
            }
        }
        if let Some((j, _, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    (tp, kept.len())
}

/// Exhaustive AP: one PR point per distinct score cutoff, envelope
/// max over every cutoff reaching the recall level, 101 levels.
/// `None` when there is no ground truth.
pub fn ap_oracle(dets: &[Detection], gts: &[Annotation], pct: i64) -> Option<f64> {
    let npos = gts.len() as i64;
    if npos == 0 {
        return None;
    }
    let mut cutoffs: Vec<f64> = dets.iter().map(|d| d.score).collect();
    cutoffs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cutoffs.dedup();
    let points: Vec<(i64, f64)> = cutoffs
        .iter()
        .map(|&c| {
            let (tp, n) = true_positives(dets, gts, c, pct);
            (tp as i64, tp as f64 / n as f64)
        })
        .collect();
    let mut total = 0.0;
    for k in 0..=100i64 {
        let best = points.iter().filter(|(tp, _)| tp * 100 >= k * npos).map(|p| p.1).fold(0.0, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

/// Random single-category scene over one or two images with at most
/// `max_dets` detections and `max_gts` ground truths. Scores come from a
/// coarse grid so ties are common; many detections are jittered copies of
/// ground truths so IoUs land on both sides of the thresholds.
pub fn random_scene(seed: u64, max_dets: usize, max_gts: usize) -> (Vec<Detection>, Vec<Annotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.random_range(1..=2u64);
    let n_gt = rng.random_range(0..=max_gts);
    let n_det = rng.random_range(0..=max_dets);
    let rand_box = |rng: &mut ChaCha8Rng| {
        BoundingBox::new(
            rng.random_range(0..40) as f64,
            rng.random_range(0..40) as f64,
            rng.random_range(1..20) as f64,
            rng.random_range(1..20) as f64,
        )
    };
    let gts: Vec<Annotation> = (0..n_gt)
        .map(|i| Annotation::new(i as u64 + 1, rng.random_range(1..=images), 1, rand_box(&mut rng)))
        .collect();
    let dets = (0..n_det)
        .map(|_| {
            let (image_id, bbox) = if !gts.is_empty() && rng.random_bool(0.7) {
                let g = &gts[rng.random_range(0..gts.len())];
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-3..=3) as f64;
                let b = g.bbox;
                let bbox = BoundingBox::new(
                    (b.x + j(&mut rng)).max(0.0),
                    (b.y + j(&mut rng)).max(0.0),
                    (b.w + j(&mut rng)).max(1.0),
                    (b.h + j(&mut rng)).max(1.0),
                );
                (g.image_id, bbox)
            } else {
                (rng.random_range(1..=images), rand_box(&mut rng))
            };
            Detection { image_id, category_id: 1, bbox, score: rng.random_range(1..=10) as f64 / 10.0 }
        })
        .collect();
    (dets, gts)
}

// ---------------------------------------------------------------------------
// Datasets

fn images(n: usize, width: u32, height: u32) -> Vec<ImageRecord> {
    (0..n as u64)
        .map(|i| ImageRecord { id: i + 1, file_name: format!("img_{:04}.png", i + 1), width, height })
        .collect()
}

/// Random dataset for split-balance checks: at most `max_images` images,
/// at most three classes with skewed frequencies, and per image at most
/// one instance of each class.
pub fn split_dataset(seed: u64, min_images: usize, max_images: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(min_images..=max_images);
    let classes = rng.random_range(1..=3u64);
    let weights: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
    let mut annotations = Vec::new();
    for image_id in 1..=n as u64 {
        for (c, w) in weights.iter().enumerate() {
            if rng.random_bool(*w * 0.8) {
                let id = annotations.len() as u64 + 1;
                annotations.push(Annotation::new(id, image_id, c as u64 + 1, BoundingBox::new(1.0, 1.0, 4.0, 4.0)));
            }
        }
    }
    Dataset {
        images: images(n, 64, 64),
        annotations,
        categories: (1..=classes).map(|id| Category { id, name: format!("class{id}") }).collect(),
    }
}

/// Largest `|count - total/k| - max(1, ceil(0.02 total))` over classes and folds.
pub fn worst_excess(ds: &Dataset, plan: &FoldPlan) -> f64 {
    let fold: BTreeMap<u64, usize> = plan.assignment.iter().copied().collect();
    let mut counts: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for a in &ds.annotations {
        counts.entry(a.category_id).or_insert_with(|| vec![0; plan.k])[fold[&a.image_id]] += 1;
    }
    let mut worst = f64::NEG_INFINITY;
    for per_fold in counts.values() {
        let total: usize = per_fold.iter().sum();
        let allowance = 1f64.max((0.02 * total as f64).ceil());
        for &n in per_fold {
            worst = worst.max((n as f64 - total as f64 / plan.k as f64).abs() - allowance);
        }
    }
    worst
}

pub fn assert_partition(ds: &Dataset, plan: &FoldPlan) {
    let mut seen = BTreeSet::new();
    for f in 0..plan.k {
        for id in plan.fold_images(f) {
            assert!(seen.insert(id), "image {id} in two test folds");
        }
    }
    assert_eq!(seen, ds.images.iter().map(|i| i.id).collect());
}

/// Composition of one synthetic stand-in for a benchmark dataset.
pub struct Composition {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub classes: [(&'static str, usize); 2],
}

pub const PLEIADES: Composition =
    Composition { images: 103, width: 512, height: 512, classes: [("Airplane", 276), ("Truncated Airplane", 14)] };

pub const SSDD: Composition =
    Composition { images: 1106, width: 500, height: 350, classes: [("Ship", 2303), ("Truncated Ship", 153)] };

/// Deterministic dataset with the given composition. Annotation `j` goes to
/// image `j mod images`; the minority class is spread evenly over the
/// annotation sequence; boxes are integer and inside the image.
pub fn composition_dataset(c: &Composition) -> Dataset {
    let [(major, _), (minor, minor_count)] = c.classes;
    let total = c.classes[0].1 + minor_count;
    let annotations = (0..total)
        .map(|j| {
            let image = j % c.images;
            let slot = j / c.images;
            let is_minor = (j * minor_count) / total != ((j + 1) * minor_count) / total;
            let (w, h) = (16 + (j * 7) % 40, 16 + (j * 11) % 40);
            let x = 8 + (slot * 97 + image * 13) % (c.width as usize - 64);
            let y = 8 + (slot * 61 + image * 29) % (c.height as usize - 64);
            let bbox = BoundingBox::new(x as f64, y as f64, w as f64, h as f64);
            Annotation::new(j as u64 + 1, image as u64 + 1, if is_minor { 2 } else { 1 }, bbox)
        })
        .collect();
    Dataset {
        images: images(c.images, c.width, c.height),
        annotations,
        categories: vec![Category { id: 1, name: major.into() }, Category { id: 2, name: minor.into() }],
    }
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

// ---------------------------------------------------------------------------
// Benchmark runs

/// Dataset whose boxes never overlap: image `i` holds up to three boxes on
/// a fixed row of slots, categories alternate.
pub fn grid_dataset(images_count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut annotations = Vec::new();
    for image_id in 1..=images_count as u64 {
        let boxes = rng.random_range(1..=3);
        for slot in 0..boxes {
            let id = annotations.len() as u64 + 1;
            let bbox = BoundingBox::new(10.0 + 100.0 * slot as f64, 20.0, 60.0, 50.0);
            annotations.push(Annotation::new(id, image_id, 1 + (id % 2), bbox));
        }
    }
    Dataset {
        images: images(images_count, 320, 120),
        annotations,
        categories: vec![Category { id: 1, name: "Ship".into() }, Category { id: 2, name: "Truncated Ship".into() }],
    }
}

/// A synthetic detector: ground truths shifted right by `shift` pixels.
#[derive(Debug, Clone, Copy)]
pub struct ModelSpec {
    pub name: &'static str,
    pub shift: f64,
    /// Adds a false positive on every third image.
    pub false_positives: bool,
}

/// One detection per ground truth, shifted right by `shift` pixels, plus
/// optionally a false positive on every third image. Scores depend only on
/// the annotation, so models built with different shifts differ in IoU alone.
pub fn shifted_detections(ds: &Dataset, shift: f64, false_positives: bool) -> Vec<Detection> {
    let mut dets: Vec<Detection> = ds
        .annotations
        .iter()
        .map(|a| Detection {
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox.translated(shift, 0.0),
            score: 0.55 + 0.4 * ((a.id * 37 % 101) as f64 / 100.0),
        })
        .collect();
    dets.extend(ds.images.iter().filter(|i| false_positives && i.id % 3 == 0).map(|i| Detection {
        image_id: i.id,
        category_id: 1,
        bbox: BoundingBox::new(0.0, 90.0, 20.0, 20.0),
        score: 0.6,
    }));
    dets
}

/// Files of a prepared benchmark run.
pub struct RunFixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
}

impl RunFixture {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

/// Writes a dataset, a k-fold plan, per-fold detections for each
/// model and a run config into a fresh directory. Folds listed in `skip` get
/// no detections file for the first model.
pub fn prepare_run(ds: &Dataset, k: usize, models: &[ModelSpec], skip: &[usize]) -> RunFixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("ann.json"), ds.to_json_string()).unwrap();
    let plan = split::stratified_kfold(ds, k, 7).unwrap();
    plan.save(root.join("plan.json")).unwrap();
    for (mi, model) in models.iter().enumerate() {
        let all = shifted_detections(ds, model.shift, model.false_positives);
        for fold in 0..k {
            if mi == 0 && skip.contains(&fold) {
                continue;
            }
            let test = plan.fold_images(fold);
            // every file also carries detections for other folds, which the run must drop
            let dets: Vec<Detection> =
                all.iter().filter(|d| test.contains(&d.image_id) || d.image_id % 5 == 0).cloned().collect();
            let path = root.join("runs").join(model.name).join(format!("fold{fold}.json"));
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(path, detbench::annotations::detections_to_json(&dets)).unwrap();
        }
    }
    let names: Vec<String> = models.iter().map(|m| format!("\"{}\"", m.name)).collect();
    let config = format!(
        r#"{{
  "datasets": [{{"name": "SSDD", "annotations": "ann.json", "plan": "plan.json",
                 "detections": "runs/{{model}}/fold{{fold}}.json"}}],
  "models": [{}],
  "iou_threshold": 0.5,
  "score_threshold": 0.5,
  "output_dir": "out",
  "seed": 7
}}"#,
        names.join(", ")
    );
    let config_path = root.join("config.json");
    std::fs::write(&config_path, config).unwrap();
    RunFixture { dir, config: config_path }
}
