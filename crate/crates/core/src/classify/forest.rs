//! Bootstrap random forest of depth-limited Gini trees.
//!
//! Rows carry class-balanced weights, so a leaf's value is the weighted
//! positive fraction of the bootstrap rows that reach it. Each tree draws
//! from its own ChaCha stream (`seed`, tree index), so fitting is
//! deterministic and tree order does not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::logistic::balanced_weights;
use super::{ClassifyError, Result};

pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_DEPTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: DEFAULT_TREES, max_depth: DEFAULT_DEPTH, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf { p: f64 },
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { p } => return p,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub max_depth: usize,
    pub n_features: usize,
}

impl ForestModel {
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        if self.trees.is_empty() {
            return 0.5;
        }
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    max_depth: usize,
    mtry: usize,
    nodes: Vec<Node>,
}

/// Weighted Gini impurity times total weight.
fn gini_mass(pos: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let q = pos / total;
    total * 2.0 * q * (1.0 - q)
}

impl Builder<'_> {
    /// `rows` are (row index, weight) pairs drawn by the bootstrap.
    fn grow(&mut self, rows: &mut [(usize, f64)], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let total: f64 = rows.iter().map(|r| r.1).sum();
        let pos: f64 = rows.iter().filter(|r| self.y[r.0]).map(|r| r.1).sum();
        let id = self.nodes.len();
        let p = if total > 0.0 { pos / total } else { 0.5 };
        self.nodes.push(Node::Leaf { p });
        if depth >= self.max_depth || pos <= 0.0 || pos >= total || rows.len() < 2 {
            return id;
        }

        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        // Partial Fisher-Yates: the first `mtry` entries become the sample.
        for k in 0..self.mtry.min(d) {
            let j = rng.random_range(k..d);
            features.swap(k, j);
        }

        let parent = gini_mass(pos, total);
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &features[..self.mtry.min(d)] {
            rows.sort_by(|a, b| self.x[a.0][f].total_cmp(&self.x[b.0][f]).then(a.0.cmp(&b.0)));
            let (mut lw, mut lp) = (0.0, 0.0);
            for k in 0..rows.len() - 1 {
                let (i, w) = rows[k];
                lw += w;
                if self.y[i] {
                    lp += w;
                }
                let (a, b) = (self.x[i][f], self.x[rows[k + 1].0][f]);
                if a == b {
                    continue;
                }
                let gain = parent - gini_mass(lp, lw) - gini_mass(pos - lp, total - lw);
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, a + (b - a) / 2.0));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };

        let split = stable_partition(rows, |r| self.x[r.0][feature] <= threshold);
        let (l, r) = rows.split_at_mut(split);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }
}

/// Stable in-place partition; returns the number of rows satisfying `pred`.
fn stable_partition(rows: &mut [(usize, f64)], pred: impl Fn(&(usize, f64)) -> bool) -> usize {
    let (mut yes, no): (Vec<_>, Vec<_>) = rows.iter().partition(|r| pred(r));
    let k = yes.len();
    yes.extend(no);
    rows.copy_from_slice(&yes);
    k
}

pub fn fit_forest(x: &[Vec<f64>], y: &[bool], params: ForestParams) -> Result<ForestModel> {
    if x.len() != y.len() || x.is_empty() {
        return Err(ClassifyError::Shape(format!("{} rows but {} labels", x.len(), y.len())));
    }
    let weights = balanced_weights(y)?;
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(ClassifyError::Shape("ragged, empty, or non-finite feature rows".into()));
    }
    let mtry = ((d as f64).sqrt().floor() as usize).max(1);
    let n = x.len();
    let mut trees = Vec::with_capacity(params.n_trees);
    for t in 0..params.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(t as u64);
        let mut counts = vec![0u32; n];
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1;
        }
        let mut rows: Vec<(usize, f64)> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i, weights[i] * f64::from(c)))
            .collect();
        let mut b = Builder { x, y, max_depth: params.max_depth, mtry, nodes: Vec::new() };
        b.grow(&mut rows, 0, &mut rng);
        trees.push(Tree { nodes: b.nodes });
    }
    Ok(ForestModel { trees, max_depth: params.max_depth, n_features: d })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> (Vec<Vec<f64>>, Vec<bool>) {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| if i < 10 { vec![i as f64 * 0.1] } else { vec![10.0 + i as f64 * 0.1] })
            .collect();
        let y = (0..20).map(|i| i >= 10).collect();
        (x, y)
    }

    #[test]
    fn single_stump_separates() {
        let (x, y) = separable();
        let f = fit_forest(&x, &y, ForestParams { n_trees: 1, max_depth: 1, seed: 7 }).unwrap();
        assert_eq!(f.trees[0].depth(), 1);
        for (r, &l) in x.iter().zip(&y) {
            assert_eq!(f.predict_proba(r) >= 0.5, l);
        }
    }

    #[test]
    fn pure_labels_rejected() {
        let (x, _) = separable();
        let y = vec![false; x.len()];
        assert!(matches!(fit_forest(&x, &y, ForestParams::default()), Err(ClassifyError::SingleClass)));
    }

    #[test]
    fn same_seed_same_model() {
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![(i * 7 % 13) as f64, (i * 5 % 11) as f64]).collect();
        let y: Vec<bool> = (0..60).map(|i| (i * 7 % 13) + (i * 5 % 11) > 11).collect();
        let p = ForestParams { n_trees: 10, max_depth: 4, seed: 42 };
        let a = fit_forest(&x, &y, p).unwrap();
        let b = fit_forest(&x, &y, p).unwrap();
        assert_eq!(a, b);
        let c = fit_forest(&x, &y, ForestParams { seed: 43, ..p }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn depth_limit_respected() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let y: Vec<bool> = x.iter().map(|r| r[0] * r[1] > 0.0).collect();
        for depth in [1, 3, 5] {
            let f = fit_forest(&x, &y, ForestParams { n_trees: 5, max_depth: depth, seed: 1 }).unwrap();
            assert!(f.trees.iter().all(|t| t.depth() <= depth));
            assert!(x.iter().all(|r| (0.0..=1.0).contains(&f.predict_proba(r))));
        }
    }

    #[test]
    fn pure_leaf_votes_one() {
        let f = ForestModel { trees: vec![Tree { nodes: vec![Node::Leaf { p: 1.0 }] }], max_depth: 0, n_features: 1 };
        assert_eq!(f.predict_proba(&[0.0]), 1.0);
    }
}
