//! Deterministic stratified k-fold plans.
//!
//! Images are indivisible, balance is measured in annotation instances per
//! category. Fold `i` is the test set of run `i`, fold `(i + 1) mod k` its
//! validation set and every other fold is training data, so `k = 10` gives an
//! 80/10/10 split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotations::Dataset;

/// Smallest fold count that leaves distinct train, validation and test folds.
pub const MIN_FOLDS: usize = 3;

/// Upper bound on repair sweeps after the greedy pass.
const MAX_REPAIR_PASSES: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("k = {0} is below {MIN_FOLDS}: train/val/test rotation needs three distinct folds")]
    TooFewFolds(usize),
    #[error("cannot build {k} folds from {images} images")]
    Infeasible { k: usize, images: usize },
    #[error("fold index {index} out of range for k = {k}")]
    FoldOutOfRange { index: usize, k: usize },
    #[error("plan was built for dataset {expected}, got {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("plan is inconsistent: {0}")]
    InvalidPlan(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed plan file {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Hex SHA-256 of the dataset's canonical JSON encoding.
pub fn dataset_checksum(ds: &Dataset) -> String {
    hex::encode(Sha256::digest(ds.to_json_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub dataset_checksum: String,
    /// `(image_id, fold)` in dataset image order.
    pub assignment: Vec<(u64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: BTreeSet<u64>,
    pub val_ids: BTreeSet<u64>,
    pub test_ids: BTreeSet<u64>,
}

impl FoldPlan {
    pub fn fold_of(&self, image_id: u64) -> Option<usize> {
        self.assignment
            .iter()
            .find(|(id, _)| *id == image_id)
            .map(|&(_, f)| f)
    }

    pub fn fold_images(&self, fold: usize) -> BTreeSet<u64> {
        self.assignment
            .iter()
            .filter(|(_, f)| *f == fold)
            .map(|&(id, _)| id)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &(_, f) in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Test = fold `i`, validation = fold `(i + 1) mod k`, train = the rest.
    pub fn materialize_fold(&self, i: usize) -> Result<FoldSplit, SplitError> {
        if i >= self.k {
            return Err(SplitError::FoldOutOfRange { index: i, k: self.k });
        }
        let val_fold = (i + 1) % self.k;
        let mut split = FoldSplit {
            fold_index: i,
            train_ids: BTreeSet::new(),
            val_ids: BTreeSet::new(),
            test_ids: BTreeSet::new(),
        };
        for &(id, f) in &self.assignment {
            let set = if f == i {
                &mut split.test_ids
            } else if f == val_fold {
                &mut split.val_ids
            } else {
                &mut split.train_ids
            };
            set.insert(id);
        }
        Ok(split)
    }

    /// Confirms the plan belongs to `ds`.
    pub fn verify(&self, ds: &Dataset) -> Result<(), SplitError> {
        let actual = dataset_checksum(ds);
        if actual != self.dataset_checksum {
            return Err(SplitError::ChecksumMismatch {
                expected: self.dataset_checksum.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization is infallible")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SplitError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|source| SplitError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SplitError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SplitError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let plan: FoldPlan = serde_json::from_str(&text).map_err(|source| SplitError::Format {
            path: path.to_path_buf(),
            source,
        })?;
        if plan.k < MIN_FOLDS {
            return Err(SplitError::TooFewFolds(plan.k));
        }
        if let Some(&(id, f)) = plan.assignment.iter().find(|(_, f)| *f >= plan.k) {
            return Err(SplitError::InvalidPlan(format!("image {id} assigned to fold {f}")));
        }
        Ok(plan)
    }
}

/// Per-image category instance counts, in image order.
struct Profile {
    image_ids: Vec<u64>,
    /// `counts[i][c]` instances of class slot `c` in image `i`.
    counts: Vec<Vec<u32>>,
    totals: Vec<u32>,
}

impl Profile {
    fn new(ds: &Dataset) -> Self {
        let mut slots: BTreeMap<u64, usize> = BTreeMap::new();
        for ann in &ds.annotations {
            let next = slots.len();
            slots.entry(ann.category_id).or_insert(next);
        }
        let index_of: HashMap<u64, usize> = ds.images.iter().enumerate().map(|(i, img)| (img.id, i)).collect();
        let mut counts = vec![vec![0u32; slots.len()]; ds.images.len()];
        let mut totals = vec![0u32; slots.len()];
        for ann in &ds.annotations {
            if let Some(&i) = index_of.get(&ann.image_id) {
                let c = slots[&ann.category_id];
                counts[i][c] += 1;
                totals[c] += 1;
            }
        }
        Self {
            image_ids: ds.image_ids(),
            counts,
            totals,
        }
    }
}

/// Weight of a unit of excess beyond the per-class allowance, relative to
/// one unit of squared deviation.
const EXCESS_PENALTY: f64 = 1_000.0;

/// Running per-fold tallies and the repair objective.
struct FoldState {
    /// `class_counts[f][c]`
    class_counts: Vec<Vec<i64>>,
    sizes: Vec<i64>,
    quota: Vec<f64>,
    allowance: Vec<f64>,
    size_quota: f64,
}

impl FoldState {
    fn new(k: usize, totals: &[u32], images: usize) -> Self {
        Self {
            class_counts: vec![vec![0; totals.len()]; k],
            sizes: vec![0; k],
            quota: totals.iter().map(|&t| f64::from(t) / k as f64).collect(),
            allowance: totals.iter().map(|&t| deviation_allowance(t as usize)).collect(),
            size_quota: images as f64 / k as f64,
        }
    }

    fn add(&mut self, f: usize, v: &[u32]) {
        for (slot, &n) in self.class_counts[f].iter_mut().zip(v) {
            *slot += i64::from(n);
        }
        self.sizes[f] += 1;
    }

    fn remove(&mut self, f: usize, v: &[u32]) {
        for (slot, &n) in self.class_counts[f].iter_mut().zip(v) {
            *slot -= i64::from(n);
        }
        self.sizes[f] -= 1;
    }

    /// Cost of fold `f` if its class counts shifted by `shift` and its
    /// size by `size_shift`: squared deviations from quota plus a steep
    /// penalty on any excess beyond the allowance.
    fn fold_cost(&self, f: usize, shift: impl Fn(usize) -> i64, size_shift: i64) -> f64 {
        let classes: f64 = self.class_counts[f]
            .iter()
            .enumerate()
            .map(|(c, &n)| {
                let dev = ((n + shift(c)) as f64 - self.quota[c]).abs();
                let excess = (dev - self.allowance[c]).max(0.0);
                dev * dev + EXCESS_PENALTY * excess * excess
            })
            .sum();
        let size_dev = (self.sizes[f] + size_shift) as f64 - self.size_quota;
        classes + size_dev * size_dev
    }

    /// Objective change when net class vector `out` leaves fold `a` for
    /// fold `b` along with `moved` images.
    fn delta(&self, a: usize, b: usize, out: &[i64], moved: i64) -> f64 {
        let before = self.fold_cost(a, |_| 0, 0) + self.fold_cost(b, |_| 0, 0);
        let after = self.fold_cost(a, |c| -out[c], -moved) + self.fold_cost(b, |c| out[c], moved);
        after - before
    }
}

/// Builds a stratified plan with `k` folds.
///
/// Images are visited rarest-class first (then by that class's count and by
/// total annotations, descending); the seed only shuffles images whose keys
/// tie. Each image goes to the fold furthest below its quota for the image's
/// rarest class. A deterministic repair pass then moves or swaps images while
/// that lowers the squared deviation of per-class and per-fold image counts
/// from their quotas, with any excess over the per-class allowance
/// penalized far more heavily.
pub fn stratified_kfold(ds: &Dataset, k: usize, seed: u64) -> Result<FoldPlan, SplitError> {
    if k < MIN_FOLDS {
        return Err(SplitError::TooFewFolds(k));
    }
    if k > ds.images.len() {
        return Err(SplitError::Infeasible {
            k,
            images: ds.images.len(),
        });
    }

    let profile = Profile::new(ds);
    let classes = profile.totals.len();
    // rarest class first; ties by category id (slot order follows first appearance, so sort explicitly)
    let mut rarity: Vec<usize> = (0..classes).collect();
    rarity.sort_by_key(|&c| (profile.totals[c], c));
    let rank_of: Vec<usize> = {
        let mut r = vec![0; classes];
        for (rank, &c) in rarity.iter().enumerate() {
            r[c] = rank;
        }
        r
    };
    let rarest_class = |i: usize| {
        profile.counts[i]
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .min_by_key(|(c, _)| rank_of[*c])
            .map(|(c, _)| c)
    };

    let mut order: Vec<usize> = (0..profile.image_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|&i| {
        let total: u32 = profile.counts[i].iter().sum();
        match rarest_class(i) {
            Some(c) => (rank_of[c], std::cmp::Reverse(profile.counts[i][c]), std::cmp::Reverse(total)),
            None => (classes, std::cmp::Reverse(0), std::cmp::Reverse(0)),
        }
    });

    let mut state = FoldState::new(k, &profile.totals, profile.image_ids.len());
    let quota = state.quota.clone();
    let mut fold_of = vec![0usize; profile.image_ids.len()];
    for &i in &order {
        let v = &profile.counts[i];
        let target = match rarest_class(i) {
            Some(c) => (0..k)
                .max_by(|&a, &b| {
                    let deficit = |f: usize| quota[c] - state.class_counts[f][c] as f64;
                    let overall = |f: usize| -> f64 {
                        v.iter()
                            .enumerate()
                            .map(|(cc, &n)| f64::from(n) * (quota[cc] - state.class_counts[f][cc] as f64))
                            .sum()
                    };
                    deficit(a)
                        .total_cmp(&deficit(b))
                        .then(overall(a).total_cmp(&overall(b)))
                        .then(state.sizes[b].cmp(&state.sizes[a]))
                        .then(b.cmp(&a))
                })
                .expect("k >= 3"),
            None => (0..k).min_by_key(|&f| (state.sizes[f], f)).expect("k >= 3"),
        };
        state.add(target, v);
        fold_of[i] = target;
    }

    repair(&profile, &mut state, &mut fold_of, k);

    Ok(FoldPlan {
        k,
        seed,
        dataset_checksum: dataset_checksum(ds),
        assignment: profile.image_ids.iter().copied().zip(fold_of).collect(),
    })
}

/// First-improvement local search over single moves and pairwise swaps.
/// Never empties a fold.
#[allow(clippy::needless_range_loop)]
fn repair(profile: &Profile, state: &mut FoldState, fold_of: &mut [usize], k: usize) {
    const EPS: f64 = 1e-9;
    let n = fold_of.len();
    let widen = |v: &[u32]| v.iter().map(|&x| i64::from(x)).collect::<Vec<i64>>();
    for _ in 0..MAX_REPAIR_PASSES {
        let mut improved = false;
        for i in 0..n {
            let a = fold_of[i];
            if state.sizes[a] <= 1 {
                continue;
            }
            let v = widen(&profile.counts[i]);
            if let Some(b) = (0..k).filter(|&b| b != a).find(|&b| state.delta(a, b, &v, 1) < -EPS) {
                state.remove(a, &profile.counts[i]);
                state.add(b, &profile.counts[i]);
                fold_of[i] = b;
                improved = true;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (fold_of[i], fold_of[j]);
                if a == b {
                    continue;
                }
                let (u, w) = (&profile.counts[i], &profile.counts[j]);
                let net: Vec<i64> = u.iter().zip(w).map(|(&x, &y)| i64::from(x) - i64::from(y)).collect();
                if net.iter().all(|&d| d == 0) {
                    continue;
                }
                if state.delta(a, b, &net, 0) < -EPS {
                    state.remove(a, u);
                    state.remove(b, w);
                    state.add(b, u);
                    state.add(a, w);
                    fold_of[i] = b;
                    fold_of[j] = a;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Per-class, per-fold instance counts and their distance from `total / k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceAudit {
    pub k: usize,
    /// Category id -> instance count per fold.
    pub counts: BTreeMap<u64, Vec<usize>>,
    pub totals: BTreeMap<u64, usize>,
    pub fold_sizes: Vec<usize>,
    /// Largest `|count - total/k|` minus the class's allowance, over all
    /// (class, fold); non-positive means every cell is within bounds.
    pub worst_excess: f64,
}

impl BalanceAudit {
    pub fn within_bounds(&self) -> bool {
        self.worst_excess <= 1e-9
    }
}

/// Allowed deviation from the per-fold quota: `max(1, ceil(0.02 * total))`.
pub fn deviation_allowance(total: usize) -> f64 {
    (0.02 * total as f64).ceil().max(1.0)
}

pub fn audit(ds: &Dataset, plan: &FoldPlan) -> BalanceAudit {
    let folds: HashMap<u64, usize> = plan.assignment.iter().copied().collect();
    let mut counts: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut totals: BTreeMap<u64, usize> = BTreeMap::new();
    for ann in &ds.annotations {
        if let Some(&f) = folds.get(&ann.image_id) {
            counts.entry(ann.category_id).or_insert_with(|| vec![0; plan.k])[f] += 1;
            *totals.entry(ann.category_id).or_default() += 1;
        }
    }
    let mut worst_excess = f64::NEG_INFINITY;
    for (cat, per_fold) in &counts {
        let total = totals[cat];
        let q = total as f64 / plan.k as f64;
        for &n in per_fold {
            worst_excess = worst_excess.max((n as f64 - q).abs() - deviation_allowance(total));
        }
    }
    BalanceAudit {
        k: plan.k,
        counts,
        totals,
        fold_sizes: plan.fold_sizes(),
        worst_excess: if worst_excess.is_finite() { worst_excess } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{Annotation, BoundingBox, Category, ImageRecord};

    /// One image per entry, each carrying `classes[i]` annotations.
    fn dataset(classes: &[&[u64]]) -> Dataset {
        let mut ds = Dataset {
            categories: vec![
                Category { id: 1, name: "A".into() },
                Category { id: 2, name: "B".into() },
                Category { id: 3, name: "C".into() },
            ],
            ..Default::default()
        };
        for (i, cats) in classes.iter().enumerate() {
            let image_id = i as u64 + 1;
            ds.images.push(ImageRecord { id: image_id, file_name: format!("{image_id}.png"), width: 64, height: 64 });
            for &c in *cats {
                let id = ds.annotations.len() as u64 + 1;
                ds.annotations.push(Annotation::new(id, image_id, c, BoundingBox::new(1.0, 1.0, 4.0, 4.0)));
            }
        }
        ds
    }

    #[test]
    fn singleton_folds() {
        let ds = dataset(&[&[1][..]; 10]);
        let plan = stratified_kfold(&ds, 10, 42).unwrap();
        assert_eq!(plan.fold_sizes(), vec![1; 10]);
    }

    #[test]
    fn two_class_profile_is_unique_balance() {
        let mut classes: Vec<&[u64]> = vec![&[1]; 10];
        classes.extend(vec![&[2u64][..]; 10]);
        let ds = dataset(&classes);
        for seed in [0, 1, 42, u64::MAX] {
            let plan = stratified_kfold(&ds, 10, seed).unwrap();
            let a = audit(&ds, &plan);
            assert_eq!(a.counts[&1], vec![1; 10]);
            assert_eq!(a.counts[&2], vec![1; 10]);
            assert_eq!(a.fold_sizes, vec![2; 10]);
        }
    }

    #[test]
    fn different_seeds_both_balanced() {
        let mut classes: Vec<&[u64]> = Vec::new();
        for i in 0..40 {
            classes.push(match i % 4 {
                0 => &[1, 1],
                1 => &[2],
                2 => &[1, 3],
                _ => &[],
            });
        }
        let ds = dataset(&classes);
        let p1 = stratified_kfold(&ds, 5, 1).unwrap();
        let p2 = stratified_kfold(&ds, 5, 2).unwrap();
        assert!(audit(&ds, &p1).within_bounds());
        assert!(audit(&ds, &p2).within_bounds());
    }

    #[test]
    fn deterministic_for_fixed_inputs() {
        let ds = dataset(&[&[1][..], &[1, 2], &[2], &[3], &[1], &[2, 2], &[3, 1], &[1]]);
        let a = stratified_kfold(&ds, 3, 9).unwrap();
        let b = stratified_kfold(&ds, 3, 9).unwrap();
        assert_eq!(a.to_json_string(), b.to_json_string());
    }

    #[test]
    fn argument_errors() {
        let ds = dataset(&[&[1][..]; 4]);
        assert!(matches!(stratified_kfold(&ds, 2, 0), Err(SplitError::TooFewFolds(2))));
        assert!(matches!(stratified_kfold(&ds, 5, 0), Err(SplitError::Infeasible { k: 5, images: 4 })));
        assert!(matches!(stratified_kfold(&Dataset::default(), 3, 0), Err(SplitError::Infeasible { .. })));
    }

    #[test]
    fn materialize_eighty_ten_ten() {
        let ds = dataset(&vec![&[1u64][..]; 100]);
        let plan = stratified_kfold(&ds, 10, 42).unwrap();
        let split = plan.materialize_fold(0).unwrap();
        assert_eq!((split.train_ids.len(), split.val_ids.len(), split.test_ids.len()), (80, 10, 10));
        assert_eq!(split.test_ids, plan.fold_images(0));
        assert_eq!(split.val_ids, plan.fold_images(1));
    }

    #[test]
    fn minimal_rotation() {
        let plan = FoldPlan {
            k: 3,
            seed: 0,
            dataset_checksum: String::new(),
            assignment: vec![(10, 0), (11, 1), (12, 2)],
        };
        let split = plan.materialize_fold(2).unwrap();
        assert_eq!(split.test_ids, BTreeSet::from([12]));
        assert_eq!(split.val_ids, BTreeSet::from([10]));
        assert_eq!(split.train_ids, BTreeSet::from([11]));
        assert!(matches!(plan.materialize_fold(3), Err(SplitError::FoldOutOfRange { index: 3, k: 3 })));
    }

    #[test]
    fn test_sets_partition_images() {
        let ds = dataset(&[&[1][..], &[1, 2], &[2], &[3], &[1], &[2, 2], &[3, 1], &[1], &[], &[2]]);
        let plan = stratified_kfold(&ds, 4, 3).unwrap();
        let mut seen = BTreeSet::new();
        for i in 0..plan.k {
            for id in plan.materialize_fold(i).unwrap().test_ids {
                assert!(seen.insert(id), "image {id} in two test folds");
            }
        }
        assert_eq!(seen, ds.image_ids().into_iter().collect());
    }

    #[test]
    fn checksum_guards_plan() {
        let ds = dataset(&[&[1], &[2], &[1]]);
        let plan = stratified_kfold(&ds, 3, 0).unwrap();
        plan.verify(&ds).unwrap();
        let mut other = ds.clone();
        other.annotations[0].bbox.x = 2.0;
        assert!(matches!(plan.verify(&other), Err(SplitError::ChecksumMismatch { .. })));
    }

    #[test]
    fn plan_file_round_trip() {
        let ds = dataset(&[&[1], &[2], &[1], &[3]]);
        let plan = stratified_kfold(&ds, 3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        plan.save(&path).unwrap();
        assert_eq!(FoldPlan::load(&path).unwrap(), plan);
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["assignment"][0].is_array());
        assert_eq!(v["k"], 3);
    }

    #[test]
    fn allowance() {
        assert_eq!(deviation_allowance(0), 1.0);
        assert_eq!(deviation_allowance(50), 1.0);
        assert_eq!(deviation_allowance(51), 2.0);
        assert_eq!(deviation_allowance(2303), 47.0);
    }
}
