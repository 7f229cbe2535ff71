//! CART trees and Breiman-style random forests for regression and binary
//! classification.
//!
//! Trees are stored as flat arrays; a row goes left when
//! `row[feature] < threshold`. Every tree is grown from its own RNG stream
//! derived from `(seed, tree index)`, so the forest does not depend on how
//! the trees are scheduled across threads.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const FOREST_FORMAT_VERSION: u32 = 1;
const LEAF: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split. Defaults to `max(1, ⌊p/3⌋)` for regression
    /// and `max(1, ⌊√p⌋)` for classification.
    #[serde(default)]
    pub mtry: Option<usize>,
    /// Minimum rows per leaf. Defaults to 5 (regression) or 1 (classification).
    #[serde(default)]
    pub min_node: Option<usize>,
    pub task: Task,
}

impl ForestParams {
    pub fn regression(n_trees: usize) -> Self {
        ForestParams {
            n_trees,
            mtry: None,
            min_node: None,
            task: Task::Regression,
        }
    }

    pub fn classification(n_trees: usize) -> Self {
        ForestParams {
            task: Task::Classification,
            ..ForestParams::regression(n_trees)
        }
    }

    pub fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or(match self.task {
            Task::Regression => (p / 3).max(1),
            Task::Classification => ((p as f64).sqrt().floor() as usize).max(1),
        })
    }

    pub fn min_node(&self) -> usize {
        self.min_node.unwrap_or(match self.task {
            Task::Regression => 5,
            Task::Classification => 1,
        })
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::invalid("n_trees must be at least 1"));
        }
        if self.min_node() == 0 {
            return Err(Error::invalid("min_node must be at least 1"));
        }
        let mtry = self.mtry_for(p);
        if mtry == 0 || mtry > p {
            return Err(Error::invalid(format!("mtry = {mtry} outside 1..={p}")));
        }
        Ok(())
    }
}

/// One CART tree as parallel flat arrays indexed by node id (root = 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub n_features: usize,
    pub task: Task,
    /// Split feature, or -1 for a leaf.
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Leaf mean (regression) or leaf label (classification).
    pub value: Vec<f64>,
    /// Training rows reaching each node, bootstrap multiplicity included.
    pub n_rows: Vec<u32>,
    /// `[class 0, class 1]` counts per node; empty for regression.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_counts: Vec<[u32; 2]>,
}

impl TreeModel {
    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.feature[node] == LEAF
    }

    pub fn leaf_for(&self, row: &[f64]) -> usize {
        let mut node = 0;
        while self.feature[node] != LEAF {
            node = if row[self.feature[node] as usize] < self.threshold[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
        node
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.value[self.leaf_for(row)]
    }

    /// A single-leaf tree.
    pub fn stump(n_features: usize, value: f64) -> Self {
        TreeModel {
            n_features,
            task: Task::Regression,
            feature: vec![LEAF],
            threshold: vec![0.0],
            left: vec![0],
            right: vec![0],
            value: vec![value],
            n_rows: vec![0],
            class_counts: Vec::new(),
        }
    }

    fn check_structure(&self) -> Result<()> {
        let n = self.n_nodes();
        let lens = [
            self.threshold.len(),
            self.left.len(),
            self.right.len(),
            self.value.len(),
            self.n_rows.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::invalid("tree arrays have inconsistent lengths"));
        }
        for node in 0..n {
            if self.feature[node] != LEAF {
                let f = self.feature[node];
                if f < 0 || f as usize >= self.n_features {
                    return Err(Error::invalid("split feature out of range"));
                }
                if self.left[node] as usize >= n || self.right[node] as usize >= n {
                    return Err(Error::invalid("child index out of range"));
                }
            }
        }
        Ok(())
    }
}

/// Classification label from class counts; ties go to class 0.
pub fn majority_label(counts: [u32; 2]) -> f64 {
    if counts[1] > counts[0] {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub n_train: usize,
    /// In-sample RMSE (regression) of the forest prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    /// In-sample accuracy (classification).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub params: ForestParams,
    pub seed: u64,
    pub n_features: usize,
    pub training: TrainingSummary,
    pub trees: Vec<TreeModel>,
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn task(&self) -> Task {
        self.params.task
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ForestModel = serde_json::from_str(s)?;
        if f.format_version != FOREST_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported forest format version {}",
                f.format_version
            )));
        }
        if f.trees.len() != f.params.n_trees {
            return Err(Error::invalid("tree count does not match params"));
        }
        for t in &f.trees {
            t.check_structure()?;
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Aggregates per-tree predictions for one row: mean or majority vote.
    pub fn aggregate(&self, tree_preds: impl Iterator<Item = f64>) -> f64 {
        match self.task() {
            Task::Regression => {
                let (s, c) = tree_preds.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
                s / c as f64
            }
            Task::Classification => {
                let mut ones = 0usize;
                let mut total = 0usize;
                for v in tree_preds {
                    total += 1;
                    if v == 1.0 {
                        ones += 1;
                    }
                }
                majority_label([(total - ones) as u32, ones as u32])
            }
        }
    }
}

fn check_rows(d: &Dataset, n_features: usize) -> Result<()> {
    if d.n_features() != n_features {
        return Err(Error::DimensionMismatch {
            expected: n_features,
            got: d.n_features(),
        });
    }
    Ok(())
}

pub fn predict_tree(tree: &TreeModel, d: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    check_rows(d, tree.n_features)?;
    Ok(rows.iter().map(|&i| tree.predict_row(d.row(i))).collect())
}

pub fn predict_forest(forest: &ForestModel, d: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    check_rows(d, forest.n_features)?;
    Ok(rows
        .iter()
        .map(|&i| {
            let row = d.row(i);
            forest.aggregate(forest.trees.iter().map(|t| t.predict_row(row)))
        })
        .collect())
}

/// `rows.len() × M` matrix whose column `t` is tree `t`'s prediction.
pub fn tree_prediction_matrix(
    forest: &ForestModel,
    d: &Dataset,
    rows: &[usize],
) -> Result<DMatrix<f64>> {
    check_rows(d, forest.n_features)?;
    let cols: Vec<Vec<f64>> = forest
        .trees
        .par_iter()
        .map(|t| rows.iter().map(|&i| t.predict_row(d.row(i))).collect())
        .collect();
    let n = rows.len();
    let mut m = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).copy_from_slice(c);
    }
    Ok(m)
}

/// Fits a forest on the rows tagged `train`.
pub fn fit_forest(d: &Dataset, params: &ForestParams, seed: u64) -> Result<ForestModel> {
    let rows = d.rows_in(crate::data::Partition::Train);
    fit_forest_rows(d, &rows, params, seed)
}

/// Fits a forest on an explicit row set (duplicates allowed).
pub fn fit_forest_rows(
    d: &Dataset,
    rows: &[usize],
    params: &ForestParams,
    seed: u64,
) -> Result<ForestModel> {
    let p = d.n_features();
    if p == 0 {
        return Err(Error::invalid("no features"));
    }
    if rows.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    params.validate(p)?;
    let truth = d.truth_for(rows)?;
    if params.task == Task::Classification {
        if let Some(v) = truth.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!(
                "classification truth must be 0 or 1, found {v}"
            )));
        }
        let ones = truth.iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == truth.len() {
            return Err(Error::invalid(
                "classification training set contains a single class",
            ));
        }
    }

    let grower = Grower {
        d,
        rows,
        truth: &truth,
        task: params.task,
        mtry: params.mtry_for(p),
        min_node: params.min_node(),
    };
    let trees: Vec<TreeModel> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| grower.grow(seed, t))
        .collect();

    let mut forest = ForestModel {
        format_version: FOREST_FORMAT_VERSION,
        params: params.clone(),
        seed,
        n_features: p,
        training: TrainingSummary {
            n_train: rows.len(),
            rmse: None,
            accuracy: None,
        },
        trees,
    };
    let fitted = predict_forest(&forest, d, rows)?;
    match params.task {
        Task::Regression => {
            let mse = fitted
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / truth.len() as f64;
            forest.training.rmse = Some(mse.sqrt());
        }
        Task::Classification => {
            let hits = fitted.iter().zip(&truth).filter(|(a, b)| a == b).count();
            forest.training.accuracy = Some(hits as f64 / truth.len() as f64);
        }
    }
    Ok(forest)
}

struct Grower<'a> {
    d: &'a Dataset,
    rows: &'a [usize],
    truth: &'a [f64],
    task: Task,
    mtry: usize,
    min_node: usize,
}

struct Split {
    feature: usize,
    threshold: f64,
    /// Impurity-decrease score; the parent term is common to all features at
    /// a node, so scores compare directly.
    score: f64,
}

impl Grower<'_> {
    fn grow(&self, seed: u64, tree_index: usize) -> TreeModel {
        let mut rng = rng_for(seed, "forest-tree", tree_index as u64);
        let n = self.rows.len();
        // Positions into `rows`/`truth`, drawn with replacement.
        let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();

        let mut tree = TreeModel {
            n_features: self.d.n_features(),
            task: self.task,
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            value: Vec::new(),
            n_rows: Vec::new(),
            class_counts: Vec::new(),
        };
        let mut features: Vec<usize> = (0..self.d.n_features()).collect();
        let mut stack = vec![(self.push_leaf(&mut tree, &sample), sample)];
        while let Some((node, members)) = stack.pop() {
            let Some(split) = self.best_split(&members, &mut features, &mut rng) else {
                continue;
            };
            let (l, r): (Vec<usize>, Vec<usize>) = members
                .iter()
                .partition(|&&s| self.x(s, split.feature) < split.threshold);
            let li = self.push_leaf(&mut tree, &l);
            let ri = self.push_leaf(&mut tree, &r);
            tree.feature[node] = split.feature as i32;
            tree.threshold[node] = split.threshold;
            tree.left[node] = li as u32;
            tree.right[node] = ri as u32;
            // Right first so the left subtree gets lower ids on average.
            stack.push((ri, r));
            stack.push((li, l));
        }
        tree
    }

    fn x(&self, pos: usize, feature: usize) -> f64 {
        self.d.feature(self.rows[pos], feature)
    }

    fn push_leaf(&self, tree: &mut TreeModel, members: &[usize]) -> usize {
        let id = tree.feature.len();
        tree.feature.push(LEAF);
        tree.threshold.push(0.0);
        tree.left.push(0);
        tree.right.push(0);
        tree.n_rows.push(members.len() as u32);
        match self.task {
            Task::Regression => {
                let mean =
                    members.iter().map(|&s| self.truth[s]).sum::<f64>() / members.len() as f64;
                tree.value.push(mean);
            }
            Task::Classification => {
                let ones = members.iter().filter(|&&s| self.truth[s] == 1.0).count() as u32;
                let counts = [members.len() as u32 - ones, ones];
                tree.value.push(majority_label(counts));
                tree.class_counts.push(counts);
            }
        }
        id
    }

    fn is_pure(&self, members: &[usize]) -> bool {
        let first = self.truth[members[0]];
        members.iter().all(|&s| self.truth[s] == first)
    }

    /// Best split over up to `mtry` randomly ordered non-constant features.
    fn best_split(
        &self,
        members: &[usize],
        features: &mut [usize],
        rng: &mut impl Rng,
    ) -> Option<Split> {
        let m = members.len();
        if m < 2 * self.min_node || self.is_pure(members) {
            return None;
        }
        features.shuffle(rng);
        let mut best: Option<Split> = None;
        let mut tried = 0;
        let mut sorted: Vec<(f64, f64)> = Vec::with_capacity(m);
        for &f in features.iter() {
            if tried == self.mtry {
                break;
            }
            sorted.clear();
            sorted.extend(members.iter().map(|&s| (self.x(s, f), self.truth[s])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            if sorted[0].0 == sorted[m - 1].0 {
                continue;
            }
            tried += 1;
            if let Some(s) = self.scan(f, &sorted) {
                if best.as_ref().map_or(true, |b| s.score > b.score) {
                    best = Some(s);
                }
            }
        }
        best
    }

    /// Scans split points of one sorted feature. The score is the quantity
    /// whose maximization is equivalent to maximal impurity decrease.
    fn scan(&self, feature: usize, sorted: &[(f64, f64)]) -> Option<Split> {
        let m = sorted.len();
        let min = self.min_node;
        let mut best: Option<(f64, usize)> = None;
        match self.task {
            Task::Regression => {
                let total: f64 = sorted.iter().map(|v| v.1).sum();
                let mut left = 0.0;
                for k in 1..m {
                    left += sorted[k - 1].1;
                    if k < min || m - k < min || sorted[k - 1].0 == sorted[k].0 {
                        continue;
                    }
                    let right = total - left;
                    let score = left * left / k as f64 + right * right / (m - k) as f64;
                    if best.map_or(true, |(b, _)| score > b) {
                        best = Some((score, k));
                    }
                }
            }
            Task::Classification => {
                let ones_total = sorted.iter().filter(|v| v.1 == 1.0).count() as f64;
                let mut ones_left = 0.0;
                for k in 1..m {
                    if sorted[k - 1].1 == 1.0 {
                        ones_left += 1.0;
                    }
                    if k < min || m - k < min || sorted[k - 1].0 == sorted[k].0 {
                        continue;
                    }
                    let (nl, nr) = (k as f64, (m - k) as f64);
                    let zl = nl - ones_left;
                    let or = ones_total - ones_left;
                    let zr = nr - or;
                    // Weighted Gini decrease ∝ Σ n_lc²/n_l + Σ n_rc²/n_r.
                    let score = (ones_left * ones_left + zl * zl) / nl + (or * or + zr * zr) / nr;
                    if best.map_or(true, |(b, _)| score > b) {
                        best = Some((score, k));
                    }
                }
            }
        }
        best.map(|(score, k)| Split {
            feature,
            threshold: 0.5 * (sorted[k - 1].0 + sorted[k].0),
            score,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn dataset(x: &[f64], p: usize, y: &[f64]) -> Dataset {
        Dataset::from_parts(x.to_vec(), p, y.to_vec()).unwrap()
    }

    #[test]
    fn stump_predicts_constant() {
        let t = TreeModel::stump(2, 3.5);
        let d = dataset(&[0.0, 1.0, 2.0, 3.0], 2, &[0.0, 0.0]);
        assert_eq!(predict_tree(&t, &d, &[0, 1]).unwrap(), vec![3.5, 3.5]);
    }

    #[test]
    fn tie_goes_to_class_zero() {
        assert_eq!(majority_label([2, 2]), 0.0);
        assert_eq!(majority_label([2, 3]), 1.0);
    }

    #[test]
    fn constant_target_regression() {
        let x: Vec<f64> = (0..40).map(|i| (i * 7 % 13) as f64).collect();
        let d = dataset(&x, 1, &[2.25; 40]);
        let rows: Vec<usize> = (0..40).collect();
        let f = fit_forest_rows(&d, &rows, &ForestParams::regression(5), 1).unwrap();
        for t in &f.trees {
            assert_eq!(t.n_nodes(), 1);
            assert_eq!(t.value[0], 2.25);
        }
        assert_eq!(f.training.rmse, Some(0.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let d1 = dataset(&[0.0, 1.0, 2.0, 3.0], 2, &[0.0, 1.0]);
        let d2 = dataset(&[0.0, 1.0], 1, &[0.0, 1.0]);
        let f = fit_forest_rows(&d1, &[0, 1], &ForestParams::regression(2), 0).unwrap();
        assert!(matches!(
            predict_forest(&f, &d2, &[0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_single_class_and_bad_labels() {
        let d = dataset(&[0.0, 1.0, 2.0], 1, &[1.0, 1.0, 1.0]);
        let params = ForestParams::classification(3);
        assert!(fit_forest_rows(&d, &[0, 1, 2], &params, 0).is_err());
        let d = dataset(&[0.0, 1.0, 2.0], 1, &[0.0, 1.0, 2.0]);
        assert!(fit_forest_rows(&d, &[0, 1, 2], &params, 0).is_err());
        assert!(fit_forest_rows(&d, &[], &ForestParams::regression(1), 0).is_err());
    }

    #[test]
    fn leaves_respect_min_node_and_children_are_valid() {
        let n = 300;
        let x: Vec<f64> = (0..n * 3).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i * 3] * 2.0 + x[i * 3 + 1]).collect();
        let d = dataset(&x, 3, &y);
        let rows: Vec<usize> = (0..n).collect();
        let params = ForestParams {
            min_node: Some(7),
            ..ForestParams::regression(4)
        };
        let f = fit_forest_rows(&d, &rows, &params, 3).unwrap();
        for t in &f.trees {
            t.check_structure().unwrap();
            for node in 0..t.n_nodes() {
                if t.is_leaf(node) {
                    assert!(t.n_rows[node] >= 7);
                }
            }
        }
    }

    #[test]
    fn json_roundtrip_and_version_check() {
        let d = dataset(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 1, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let rows: Vec<usize> = (0..6).collect();
        let f = fit_forest_rows(&d, &rows, &ForestParams::classification(3), 9).unwrap();
        let back = ForestModel::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        let bumped = f.to_json().unwrap().replace("\"format_version\":1", "\"format_version\":99");
        assert!(ForestModel::from_json(&bumped).is_err());
    }
}
