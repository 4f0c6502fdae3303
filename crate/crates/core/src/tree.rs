//! CART classification trees and first-order softmax gradient boosting.
//!
//! Both learners share one exhaustive split search over presorted feature
//! columns. Classification trees use Gini impurity; the regression trees
//! inside the boosted ensemble use variance reduction. Ties are broken
//! toward the lowest feature index, then the lowest threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FeatureVector, N_FEATURES, N_SLICES};

pub const N_CLASSES: usize = N_SLICES;
/// Version tag written into persisted model documents.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("samples and labels differ in length ({samples} vs {labels})")]
    LengthMismatch { samples: usize, labels: usize },
    #[error("label {0} out of range")]
    BadLabel(usize),
    #[error("class absent from training data: {0}")]
    ClassAbsent(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_gain: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 6,
            min_samples_split: 20,
            min_gain: 1e-7,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.max_depth < 1 {
            return Err(TreeError::InvalidParams("max_depth must be >= 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(TreeError::InvalidParams("min_samples_split must be >= 2".into()));
        }
        if !self.min_gain.is_finite() {
            return Err(TreeError::InvalidParams("min_gain must be finite".into()));
        }
        Ok(())
    }
}

/// Gini impurity `1 - sum p_i^2`; an empty node has impurity 0.
pub fn gini(counts: &[usize; N_CLASSES]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Node statistics a split criterion accumulates while sweeping a column.
trait Criterion {
    type Acc: Clone;
    fn empty(&self) -> Self::Acc;
    fn push(&self, acc: &mut Self::Acc, sample: usize);
    fn pop(&self, acc: &mut Self::Acc, sample: usize);
    /// Impurity scaled by the node's sample count.
    fn weighted_impurity(&self, acc: &Self::Acc) -> f64;
}

struct GiniCriterion<'a> {
    labels: &'a [usize],
}

impl Criterion for GiniCriterion<'_> {
    type Acc = [usize; N_CLASSES];

    fn empty(&self) -> Self::Acc {
        [0; N_CLASSES]
    }

    fn push(&self, acc: &mut Self::Acc, sample: usize) {
        acc[self.labels[sample]] += 1;
    }

    fn pop(&self, acc: &mut Self::Acc, sample: usize) {
        acc[self.labels[sample]] -= 1;
    }

    fn weighted_impurity(&self, acc: &Self::Acc) -> f64 {
        let n: usize = acc.iter().sum();
        if n == 0 {
            return 0.0;
        }
        let sq: f64 = acc.iter().map(|&c| (c as f64) * (c as f64)).sum();
        n as f64 - sq / n as f64
    }
}

struct VarianceCriterion<'a> {
    targets: &'a [f64],
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Criterion for VarianceCriterion<'_> {
    type Acc = Moments;

    fn empty(&self) -> Self::Acc {
        Moments::default()
    }

    fn push(&self, acc: &mut Self::Acc, sample: usize) {
        let y = self.targets[sample];
        acc.n += 1;
        acc.sum += y;
        acc.sum_sq += y * y;
    }

    fn pop(&self, acc: &mut Self::Acc, sample: usize) {
        let y = self.targets[sample];
        acc.n -= 1;
        acc.sum -= y;
        acc.sum_sq -= y * y;
    }

    fn weighted_impurity(&self, acc: &Self::Acc) -> f64 {
        if acc.n == 0 {
            return 0.0;
        }
        (acc.sum_sq - acc.sum * acc.sum / acc.n as f64).max(0.0)
    }
}

/// Exhaustive search over `sorted[f]`, the node's sample indices ordered by
/// feature `f`.
fn search_split<C: Criterion>(
    criterion: &C,
    samples: &[FeatureVector],
    sorted: &[Vec<usize>; N_FEATURES],
) -> Option<Split> {
    let n = sorted[0].len();
    if n < 2 {
        return None;
    }
    let mut parent = criterion.empty();
    for &i in &sorted[0] {
        criterion.push(&mut parent, i);
    }
    let parent_imp = criterion.weighted_impurity(&parent);
    let mut best: Option<Split> = None;
    for (f, order) in sorted.iter().enumerate() {
        let mut left = criterion.empty();
        let mut right = parent.clone();
        for k in 0..n - 1 {
            let i = order[k];
            criterion.push(&mut left, i);
            criterion.pop(&mut right, i);
            let lo = samples[i].0[f];
            let hi = samples[order[k + 1]].0[f];
            if lo >= hi {
                continue;
            }
            let gain = (parent_imp
                - criterion.weighted_impurity(&left)
                - criterion.weighted_impurity(&right))
                / n as f64;
            if best.is_none_or(|b| gain > b.gain) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(Split {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

fn presort(samples: &[FeatureVector], indices: &[usize]) -> [Vec<usize>; N_FEATURES] {
    std::array::from_fn(|f| {
        let mut order = indices.to_vec();
        order.sort_by(|&a, &b| samples[a].0[f].total_cmp(&samples[b].0[f]).then(a.cmp(&b)));
        order
    })
}

fn partition(
    samples: &[FeatureVector],
    sorted: &[Vec<usize>; N_FEATURES],
    split: &Split,
) -> ([Vec<usize>; N_FEATURES], [Vec<usize>; N_FEATURES]) {
    let goes_left = |i: usize| samples[i].0[split.feature] <= split.threshold;
    let left = std::array::from_fn(|f| sorted[f].iter().copied().filter(|&i| goes_left(i)).collect());
    let right = std::array::from_fn(|f| sorted[f].iter().copied().filter(|&i| !goes_left(i)).collect());
    (left, right)
}

/// Best Gini split over all features and midpoints between consecutive
/// distinct values, or `None` when fewer than two samples are given or the
/// best gain is below `min_gain`.
pub fn best_split(samples: &[FeatureVector], labels: &[usize], min_gain: f64) -> Option<Split> {
    if samples.len() < 2 || samples.len() != labels.len() {
        return None;
    }
    let indices: Vec<usize> = (0..samples.len()).collect();
    let sorted = presort(samples, &indices);
    search_split(&GiniCriterion { labels }, samples, &sorted).filter(|s| s.gain >= min_gain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    /// `x[feature] <= threshold` routes to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        counts: [u64; N_CLASSES],
        probs: [f64; N_CLASSES],
    },
}

/// CART classifier stored as a flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub params: TreeParams,
    pub nodes: Vec<TreeNode>,
}

fn check_training_set(samples: &[FeatureVector], labels: &[usize]) -> Result<(), TreeError> {
    if samples.is_empty() {
        return Err(TreeError::EmptyDataset);
    }
    if samples.len() != labels.len() {
        return Err(TreeError::LengthMismatch {
            samples: samples.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(TreeError::BadLabel(bad));
    }
    Ok(())
}

fn leaf_from_counts(counts: [usize; N_CLASSES]) -> TreeNode {
    let total: usize = counts.iter().sum();
    let probs = if total == 0 {
        [1.0 / N_CLASSES as f64; N_CLASSES]
    } else {
        counts.map(|c| c as f64 / total as f64)
    };
    TreeNode::Leaf {
        counts: counts.map(|c| c as u64),
        probs,
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl DecisionTree {
    pub fn fit(samples: &[FeatureVector], labels: &[usize], params: TreeParams) -> Result<Self, TreeError> {
        params.validate()?;
        check_training_set(samples, labels)?;
        let indices: Vec<usize> = (0..samples.len()).collect();
        let sorted = presort(samples, &indices);
        let mut tree = DecisionTree {
            params,
            nodes: Vec::new(),
        };
        tree.grow(samples, labels, sorted, 0);
        Ok(tree)
    }

    fn grow(
        &mut self,
        samples: &[FeatureVector],
        labels: &[usize],
        sorted: [Vec<usize>; N_FEATURES],
        depth: usize,
    ) -> usize {
        let id = self.nodes.len();
        let mut counts = [0usize; N_CLASSES];
        for &i in &sorted[0] {
            counts[labels[i]] += 1;
        }
        let n = sorted[0].len();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let split = if depth >= self.params.max_depth || n < self.params.min_samples_split || pure {
            None
        } else {
            search_split(&GiniCriterion { labels }, samples, &sorted)
                .filter(|s| s.gain >= self.params.min_gain)
        };
        let Some(split) = split else {
            self.nodes.push(leaf_from_counts(counts));
            return id;
        };
        self.nodes.push(TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: 0,
            right: 0,
        });
        let (l, r) = partition(samples, &sorted, &split);
        let left = self.grow(samples, labels, l, depth + 1);
        let right = self.grow(samples, labels, r, depth + 1);
        if let TreeNode::Split {
            left: lref,
            right: rref,
            ..
        } = &mut self.nodes[id]
        {
            *lref = left;
            *rref = right;
        }
        id
    }

    pub fn predict_proba(&self, x: &FeatureVector) -> [f64; N_CLASSES] {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { probs, .. } => return *probs,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => idx = if x.0[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict(&self, x: &FeatureVector) -> usize {
        argmax(&self.predict_proba(x))
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], idx: usize) -> usize {
            match &nodes[idx] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }
}

/// Shorthand for [`DecisionTree::fit`].
pub fn fit_tree(samples: &[FeatureVector], labels: &[usize], params: TreeParams) -> Result<DecisionTree, TreeError> {
    DecisionTree::fit(samples, labels, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<RegNode>,
}

impl RegressionTree {
    fn fit(samples: &[FeatureVector], targets: &[f64], params: &TreeParams, sorted: [Vec<usize>; N_FEATURES]) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        tree.grow(samples, targets, params, sorted, 0);
        tree
    }

    fn grow(
        &mut self,
        samples: &[FeatureVector],
        targets: &[f64],
        params: &TreeParams,
        sorted: [Vec<usize>; N_FEATURES],
        depth: usize,
    ) -> usize {
        let id = self.nodes.len();
        let n = sorted[0].len();
        let mean = sorted[0].iter().map(|&i| targets[i]).sum::<f64>() / n.max(1) as f64;
        let constant = sorted[0].iter().all(|&i| targets[i] == targets[sorted[0][0]]);
        let split = if depth >= params.max_depth || n < params.min_samples_split || constant {
            None
        } else {
            search_split(&VarianceCriterion { targets }, samples, &sorted).filter(|s| s.gain >= params.min_gain)
        };
        let Some(split) = split else {
            self.nodes.push(RegNode::Leaf { value: mean });
            return id;
        };
        self.nodes.push(RegNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: 0,
            right: 0,
        });
        let (l, r) = partition(samples, &sorted, &split);
        let left = self.grow(samples, targets, params, l, depth + 1);
        let right = self.grow(samples, targets, params, r, depth + 1);
        if let RegNode::Split {
            left: lref,
            right: rref,
            ..
        } = &mut self.nodes[id]
        {
            *lref = left;
            *rref = right;
        }
        id
    }

    pub fn predict(&self, x: &FeatureVector) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                RegNode::Leaf { value } => return *value,
                RegNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => idx = if x.0[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub rounds: usize,
    pub learning_rate: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            rounds: 50,
            learning_rate: 0.3,
        }
    }
}

/// Multiclass softmax ensemble: one regression tree per class per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub boost: BoostParams,
    pub tree_params: TreeParams,
    pub base_score: [f64; N_CLASSES],
    pub trees: [Vec<RegressionTree>; N_CLASSES],
}

pub fn softmax(scores: &[f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = scores.map(|s| (s - max).exp());
    let sum: f64 = exps.iter().sum();
    exps.map(|e| e / sum)
}

impl Ensemble {
    /// Fits with per-round training log-loss recorded into `trace` when given.
    pub fn fit_traced(
        samples: &[FeatureVector],
        labels: &[usize],
        boost: BoostParams,
        tree_params: TreeParams,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<Self, TreeError> {
        tree_params.validate()?;
        if !(boost.learning_rate.is_finite() && boost.learning_rate > 0.0) {
            return Err(TreeError::InvalidParams("learning_rate must be > 0".into()));
        }
        check_training_set(samples, labels)?;
        let n = samples.len();
        let mut counts = [0usize; N_CLASSES];
        for &l in labels {
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(TreeError::ClassAbsent(c));
        }
        let base_score = counts.map(|c| (c as f64 / n as f64).ln());
        let indices: Vec<usize> = (0..n).collect();
        let sorted = presort(samples, &indices);

        let mut scores = vec![base_score; n];
        let mut trees: [Vec<RegressionTree>; N_CLASSES] = Default::default();
        let mut residuals = vec![0.0; n];
        if let Some(t) = trace.as_deref_mut() {
            t.push(log_loss(&scores, labels));
        }
        for _ in 0..boost.rounds {
            let probs: Vec<[f64; N_CLASSES]> = scores.iter().map(softmax).collect();
            let mut round = Vec::with_capacity(N_CLASSES);
            for c in 0..N_CLASSES {
                for i in 0..n {
                    let y = if labels[i] == c { 1.0 } else { 0.0 };
                    residuals[i] = y - probs[i][c];
                }
                round.push(RegressionTree::fit(samples, &residuals, &tree_params, sorted.clone()));
            }
            for (c, tree) in round.into_iter().enumerate() {
                for (i, s) in scores.iter_mut().enumerate() {
                    s[c] += boost.learning_rate * tree.predict(&samples[i]);
                }
                trees[c].push(tree);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(log_loss(&scores, labels));
            }
        }
        Ok(Ensemble {
            boost,
            tree_params,
            base_score,
            trees,
        })
    }

    pub fn fit(
        samples: &[FeatureVector],
        labels: &[usize],
        boost: BoostParams,
        tree_params: TreeParams,
    ) -> Result<Self, TreeError> {
        Self::fit_traced(samples, labels, boost, tree_params, None)
    }

    pub fn raw_scores(&self, x: &FeatureVector) -> [f64; N_CLASSES] {
        let mut s = self.base_score;
        for (c, trees) in self.trees.iter().enumerate() {
            s[c] += self.boost.learning_rate * trees.iter().map(|t| t.predict(x)).sum::<f64>();
        }
        s
    }

    pub fn predict_proba(&self, x: &FeatureVector) -> [f64; N_CLASSES] {
        softmax(&self.raw_scores(x))
    }

    pub fn predict(&self, x: &FeatureVector) -> usize {
        argmax(&self.predict_proba(x))
    }

    pub fn rounds(&self) -> usize {
        self.trees[0].len()
    }
}

fn log_loss(scores: &[[f64; N_CLASSES]], labels: &[usize]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| -softmax(s)[l].max(1e-300).ln())
        .sum();
    total / scores.len() as f64
}

/// Shorthand for [`Ensemble::fit`].
pub fn fit_gbdt(
    samples: &[FeatureVector],
    labels: &[usize],
    boost: BoostParams,
    tree_params: TreeParams,
) -> Result<Ensemble, TreeError> {
    Ensemble::fit(samples, labels, boost, tree_params)
}

/// A fitted slice classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    Tree(DecisionTree),
    Boosted(Ensemble),
}

impl Classifier {
    pub fn predict_proba(&self, x: &FeatureVector) -> [f64; N_CLASSES] {
        match self {
            Classifier::Tree(t) => t.predict_proba(x),
            Classifier::Boosted(e) => e.predict_proba(x),
        }
    }

    pub fn predict(&self, x: &FeatureVector) -> usize {
        argmax(&self.predict_proba(x))
    }

    /// The same model with class `c` reported as `map[c]`; `map` must be a
    /// permutation.
    pub fn relabeled(&self, map: [usize; N_CLASSES]) -> Result<Classifier, TreeError> {
        let mut seen = [false; N_CLASSES];
        for &m in &map {
            if m >= N_CLASSES || std::mem::replace(&mut seen[m], true) {
                return Err(TreeError::InvalidParams(format!("{map:?} is not a class permutation")));
            }
        }
        fn permute<T: Clone>(values: &[T; N_CLASSES], map: [usize; N_CLASSES]) -> [T; N_CLASSES] {
            let mut out = values.clone();
            for c in 0..N_CLASSES {
                out[map[c]] = values[c].clone();
            }
            out
        }
        Ok(match self {
            Classifier::Tree(t) => {
                let mut t = t.clone();
                for node in &mut t.nodes {
                    if let TreeNode::Leaf { counts, probs } = node {
                        *counts = permute(counts, map);
                        *probs = permute(probs, map);
                    }
                }
                Classifier::Tree(t)
            }
            Classifier::Boosted(e) => {
                let mut e = e.clone();
                e.base_score = permute(&e.base_score, map);
                e.trees = permute(&e.trees, map);
                Classifier::Boosted(e)
            }
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument<T> {
    format_version: u32,
    model: T,
}

/// Serializes any model as a versioned JSON document.
pub fn model_to_json<T: Serialize>(model: &T) -> Result<String, TreeError> {
    Ok(serde_json::to_string_pretty(&ModelDocument {
        format_version: MODEL_FORMAT_VERSION,
        model,
    })?)
}

pub fn model_from_json<T: for<'de> Deserialize<'de>>(json: &str) -> Result<T, TreeError> {
    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
    }
    let header: Header = serde_json::from_str(json)?;
    if header.format_version != MODEL_FORMAT_VERSION {
        return Err(TreeError::UnsupportedVersion(header.format_version));
    }
    let doc: ModelDocument<T> = serde_json::from_str(json)?;
    Ok(doc.model)
}

pub fn save_model<T: Serialize>(model: &T, path: &std::path::Path) -> Result<(), TreeError> {
    let mut json = model_to_json(model)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<T, TreeError> {
    model_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(x: f64) -> FeatureVector {
        FeatureVector([x, 0.0, 0.0])
    }

    fn one_d() -> (Vec<FeatureVector>, Vec<usize>) {
        (vec![fv(1.0), fv(2.0), fv(3.0), fv(4.0)], vec![0, 0, 1, 1])
    }

    fn small_params(max_depth: usize) -> TreeParams {
        TreeParams {
            max_depth,
            min_samples_split: 2,
            min_gain: 1e-7,
        }
    }

    /// Three tight, well separated blobs in the first two features.
    pub(crate) fn blobs(per_class: usize, seed: u64) -> (Vec<FeatureVector>, Vec<usize>) {
        let centers = [(0.0, 0.0), (10.0, 0.0), (5.0, 10.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let dx: f64 = rng.random_range(-0.5..0.5);
                let dy: f64 = rng.random_range(-0.5..0.5);
                x.push(FeatureVector([cx + dx, cy + dy, 0.0]));
                y.push(c);
            }
        }
        (x, y)
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[4, 0, 0]), 0.0);
        assert_eq!(gini(&[2, 2, 0]), 0.5);
        assert!((gini(&[3, 1, 0]) - 0.375).abs() < 1e-15);
        assert_eq!(gini(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn best_split_one_d() {
        let (x, y) = one_d();
        let s = best_split(&x, &y, 1e-7).unwrap();
        assert_eq!(s.feature, 0);
        assert_eq!(s.threshold, 2.5);
        assert!((s.gain - 0.5).abs() < 1e-12);
    }

    #[test]
    fn best_split_none_when_pure_or_identical() {
        let (x, _) = one_d();
        assert!(best_split(&x, &[1, 1, 1, 1], 1e-7).is_none());
        assert!(best_split(&[fv(2.0), fv(2.0)], &[0, 1], 1e-7).is_none());
        assert!(best_split(&[fv(2.0)], &[0], 0.0).is_none());
    }

    #[test]
    fn best_split_prefers_lowest_feature_on_ties() {
        let x: Vec<FeatureVector> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| FeatureVector([v, v, 0.0])).collect();
        let s = best_split(&x, &[0, 0, 1, 1], 1e-7).unwrap();
        assert_eq!(s.feature, 0);
    }

    #[test]
    fn stump_fits_one_d() {
        let (x, y) = one_d();
        let tree = fit_tree(&x, &y, small_params(1)).unwrap();
        assert_eq!(tree.depth(), 1);
        assert!(x.iter().zip(&y).all(|(xi, &yi)| tree.predict(xi) == yi));
        assert_eq!(tree.predict_proba(&fv(3.7)), [0.0, 1.0, 0.0]);
        // boundary value routes left
        assert_eq!(tree.predict(&fv(2.5)), 0);
    }

    #[test]
    fn pure_data_gives_leaf() {
        let (x, _) = one_d();
        let tree = fit_tree(&x, &[2, 2, 2, 2], small_params(4)).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.predict_proba(&fv(0.0)), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn min_samples_split_stops_growth() {
        let (x, _) = one_d();
        let params = TreeParams {
            min_samples_split: 5,
            ..small_params(4)
        };
        let tree = fit_tree(&x, &[0, 0, 0, 1], params).unwrap();
        assert_eq!(tree.depth(), 0);
        assert_eq!(tree.predict_proba(&fv(4.0)), [0.75, 0.25, 0.0]);
    }

    #[test]
    fn uniform_leaf_breaks_ties_low() {
        let tree = fit_tree(&[fv(1.0), fv(1.0), fv(1.0)], &[0, 1, 2], small_params(3)).unwrap();
        let p = tree.predict_proba(&fv(1.0));
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(tree.predict(&fv(1.0)), 0);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_tree(&[], &[], TreeParams::default()), Err(TreeError::EmptyDataset)));
        let (x, y) = one_d();
        let bad = TreeParams {
            max_depth: 0,
            ..TreeParams::default()
        };
        assert!(matches!(fit_tree(&x, &y, bad), Err(TreeError::InvalidParams(_))));
        assert!(matches!(
            fit_gbdt(&x, &y, BoostParams::default(), TreeParams::default()),
            Err(TreeError::ClassAbsent(2))
        ));
    }

    #[test]
    fn zero_rounds_predicts_priors() {
        let (mut x, mut y) = blobs(10, 1);
        x.truncate(25);
        y.truncate(25);
        let ens = fit_gbdt(
            &x,
            &y,
            BoostParams {
                rounds: 0,
                learning_rate: 0.3,
            },
            TreeParams::default(),
        )
        .unwrap();
        let priors = [0.4, 0.4, 0.2];
        for xi in &x {
            let p = ens.predict_proba(xi);
            for c in 0..3 {
                assert!((p[c] - priors[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_round_residuals_from_uniform_scores() {
        // balanced classes -> uniform initial probabilities
        let p = softmax(&[(1.0f64 / 3.0).ln(); 3]);
        let residual: Vec<f64> = (0..3).map(|c| f64::from(u8::from(c == 0)) - p[c]).collect();
        assert!((residual[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((residual[1] + 1.0 / 3.0).abs() < 1e-12);
        assert!((residual[2] + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn boosting_separates_blobs_with_monotone_loss() {
        let (x, y) = blobs(40, 2);
        let mut trace = Vec::new();
        let ens = Ensemble::fit_traced(&x, &y, BoostParams::default(), TreeParams::default(), Some(&mut trace)).unwrap();
        assert_eq!(ens.rounds(), 50);
        assert!(ens.trees.iter().all(|t| t.len() == 50));
        let acc = x.iter().zip(&y).filter(|(xi, &yi)| ens.predict(xi) == yi).count();
        assert_eq!(acc, x.len());
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss went up: {w:?}");
        }
    }

    #[test]
    fn model_json_roundtrip_and_version_check() {
        let (x, y) = blobs(30, 3);
        let ens = Classifier::Boosted(fit_gbdt(&x, &y, BoostParams { rounds: 5, learning_rate: 0.3 }, TreeParams::default()).unwrap());
        let json = model_to_json(&ens).unwrap();
        let back: Classifier = model_from_json(&json).unwrap();
        assert_eq!(back, ens);
        let tree = Classifier::Tree(fit_tree(&x, &y, TreeParams::default()).unwrap());
        assert_eq!(model_from_json::<Classifier>(&model_to_json(&tree).unwrap()).unwrap(), tree);
        let future = json.replacen("\"format_version\": 1", "\"format_version\": 9", 1);
        assert!(matches!(model_from_json::<Classifier>(&future), Err(TreeError::UnsupportedVersion(9))));
    }

    #[test]
    fn relabeling_permutes_predictions() {
        let (x, y) = blobs(30, 4);
        let map = [1, 2, 0];
        for model in [
            Classifier::Tree(fit_tree(&x, &y, TreeParams::default()).unwrap()),
            Classifier::Boosted(fit_gbdt(&x, &y, BoostParams { rounds: 5, learning_rate: 0.3 }, TreeParams::default()).unwrap()),
        ] {
            let swapped = model.relabeled(map).unwrap();
            for xi in &x {
                assert_eq!(swapped.predict(xi), map[model.predict(xi)]);
            }
        }
        assert!(Classifier::Tree(fit_tree(&x, &y, TreeParams::default()).unwrap()).relabeled([0, 0, 1]).is_err());
    }

    fn train_accuracy(tree: &DecisionTree, x: &[FeatureVector], y: &[usize]) -> usize {
        x.iter().zip(y).filter(|(xi, &yi)| tree.predict(xi) == yi).count()
    }

    proptest! {
        #[test]
        fn accuracy_monotone_in_depth(points in prop::collection::vec((0u8..8, 0u8..8, 0usize..3), 2..40)) {
            let x: Vec<FeatureVector> = points.iter().map(|&(a, b, _)| FeatureVector([f64::from(a), f64::from(b), 0.0])).collect();
            let y: Vec<usize> = points.iter().map(|p| p.2).collect();
            let mut last = 0;
            for depth in 1..6 {
                let tree = fit_tree(&x, &y, small_params(depth)).unwrap();
                let acc = train_accuracy(&tree, &x, &y);
                prop_assert!(acc >= last);
                last = acc;
            }
        }

        #[test]
        fn monotone_transform_invariance(points in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, 0usize..3), 2..40)) {
            let x: Vec<FeatureVector> = points.iter().map(|&(a, b, _)| FeatureVector([a, b, 0.0])).collect();
            let y: Vec<usize> = points.iter().map(|p| p.2).collect();
            let warp = |v: &FeatureVector| FeatureVector([v.0[0].powi(3) + 2.0, (v.0[1] + 1.0).ln(), v.0[2]]);
            let xt: Vec<FeatureVector> = x.iter().map(warp).collect();
            let a = fit_tree(&x, &y, small_params(3)).unwrap();
            let b = fit_tree(&xt, &y, small_params(3)).unwrap();
            for (xi, xti) in x.iter().zip(&xt) {
                prop_assert_eq!(a.predict_proba(xi), b.predict_proba(xti));
            }
        }

        #[test]
        fn softmax_sums_to_one(s in prop::array::uniform3(-50.0f64..50.0)) {
            let p = softmax(&s);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn leaf_probs_normalized(points in prop::collection::vec((0u8..5, 0usize..3), 1..30)) {
            let x: Vec<FeatureVector> = points.iter().map(|&(a, _)| fv(f64::from(a))).collect();
            let y: Vec<usize> = points.iter().map(|p| p.1).collect();
            let tree = fit_tree(&x, &y, small_params(3)).unwrap();
            for node in &tree.nodes {
                if let TreeNode::Leaf { counts, probs } = node {
                    let total: u64 = counts.iter().sum();
                    prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    for c in 0..3 {
                        prop_assert!((probs[c] - counts[c] as f64 / total as f64).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
