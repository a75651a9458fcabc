//! Gradient-boosted regression trees with exact greedy, leaf-wise growth.
//!
//! Each round fits one tree to the gradient/hessian statistics of the current
//! scores. A split's gain is
//! `0.5 * (G_L^2/(H_L+λ) + G_R^2/(H_R+λ) - G^2/(H+λ))` and a leaf's value is
//! `-G/(H+λ)`; tree outputs are scaled by the learning rate.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_nn::stable_sigmoid;

pub const GBT_FORMAT_VERSION: u32 = 1;

/// Gains at or below this are treated as no improvement (rounding noise).
const MIN_GAIN: f64 = 1e-12;
const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Logistic,
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub colsample_bytree: f64,
    pub max_leaves: usize,
    pub objective: Objective,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            learning_rate: 0.03,
            max_depth: 9,
            colsample_bytree: 0.7,
            max_leaves: 100,
            objective: Objective::Logistic,
            lambda: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning_rate must be in (0, 1], got {}", self.learning_rate));
        }
        if !(self.colsample_bytree > 0.0 && self.colsample_bytree <= 1.0) {
            return bad(format!("colsample_bytree must be in (0, 1], got {}", self.colsample_bytree));
        }
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1".into());
        }
        if self.max_leaves < 2 {
            return bad("max_leaves must be >= 2".into());
        }
        if !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return bad("lambda and min_child_weight must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    /// Rows with `x[feature] < threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize, gain: f64 },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Column subset this tree was allowed to split on.
    pub features: Vec<usize>,
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf_value(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right, .. } => {
                    i = if row[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub format_version: u32,
    pub params: GbtParams,
    pub n_features: usize,
    /// Raw score before any tree (mean or log-odds).
    pub base_score: f64,
    pub trees: Vec<Tree>,
    /// Training objective after 0..=n trees.
    pub train_loss: Vec<f64>,
}

fn check_matrix(x: &[Vec<f64>], n_features: Option<usize>) -> Result<usize> {
    let nf = n_features.or_else(|| x.first().map(Vec::len)).unwrap_or(0);
    for (i, row) in x.iter().enumerate() {
        if row.len() != nf {
            return Err(Error::Shape(format!("row {i} has {} features, expected {nf}", row.len())));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("row {i} feature {j} is not finite (missing values are not supported)")));
        }
    }
    Ok(nf)
}

fn objective_loss(obj: Objective, scores: &[f64], y: &[f64], w: &[f64]) -> f64 {
    let wsum: f64 = w.iter().sum();
    let total: f64 = scores
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&f, &t), &wi)| {
            wi * match obj {
                Objective::Squared => 0.5 * (f - t) * (f - t),
                Objective::Logistic => crate::tensor_nn::softplus(f) - t * f,
            }
        })
        .sum();
    total / wsum
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
    /// Position in the feature's sorted list where the right child starts.
    cut: usize,
    list: usize,
}

struct Leaf {
    node: usize,
    depth: usize,
    /// Row indices sorted by each sampled feature.
    sorted: Vec<Vec<u32>>,
    g: f64,
    h: f64,
    best: Option<SplitChoice>,
}

struct Candidate {
    gain: f64,
    node: usize,
    slot: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Candidate {
    // Highest gain first; equal gains go to the earlier node.
    fn cmp(&self, o: &Self) -> Ordering {
        self.gain.total_cmp(&o.gain).then_with(|| o.node.cmp(&self.node))
    }
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    features: &'a [usize],
    params: &'a GbtParams,
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn best_split(&self, leaf: &Leaf) -> Option<SplitChoice> {
        if leaf.depth >= self.params.max_depth {
            return None;
        }
        let parent = self.score(leaf.g, leaf.h);
        let mut best: Option<SplitChoice> = None;
        for (li, rows) in leaf.sorted.iter().enumerate() {
            let f = self.features[li];
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..rows.len().saturating_sub(1) {
                let r = rows[k] as usize;
                gl += self.grad[r];
                hl += self.hess[r];
                let v = self.x[r][f];
                let next = self.x[rows[k + 1] as usize][f];
                if next <= v {
                    continue;
                }
                let (gr, hr) = (leaf.g - gl, leaf.h - hl);
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent);
                if gain > MIN_GAIN && best.is_none_or(|b| gain > b.gain) {
                    let mid = v + (next - v) / 2.0;
                    let threshold = if mid > v { mid } else { next };
                    best = Some(SplitChoice { feature: f, threshold, gain, cut: k + 1, list: li });
                }
            }
        }
        best
    }

    fn grow(&self, n_rows: usize, presorted: &[Vec<u32>]) -> Tree {
        let lambda = self.params.lambda;
        let sorted: Vec<Vec<u32>> = self.features.iter().map(|&f| presorted[f].clone()).collect();
        let (g, h) = (0..n_rows).fold((0.0, 0.0), |(g, h), r| (g + self.grad[r], h + self.hess[r]));
        let mut nodes = vec![TreeNode::Leaf { value: -g / (h + lambda) }];
        let mut root = Leaf { node: 0, depth: 0, sorted, g, h, best: None };
        root.best = self.best_split(&root);
        let mut slots: Vec<Option<Leaf>> = Vec::new();
        let mut heap = BinaryHeap::new();
        let push = |leaf: Leaf, slots: &mut Vec<Option<Leaf>>, heap: &mut BinaryHeap<Candidate>| {
            if let Some(b) = leaf.best {
                heap.push(Candidate { gain: b.gain, node: leaf.node, slot: slots.len() });
                slots.push(Some(leaf));
            }
        };
        push(root, &mut slots, &mut heap);
        let mut n_leaves = 1;
        let mut goes_left = vec![false; n_rows];
        while n_leaves < self.params.max_leaves {
            let Some(c) = heap.pop() else { break };
            let leaf = slots[c.slot].take().expect("each slot is popped once");
            let split = leaf.best.expect("only splittable leaves are queued");
            let chosen = &leaf.sorted[split.list];
            for (k, &r) in chosen.iter().enumerate() {
                goes_left[r as usize] = k < split.cut;
            }
            let mut left_sorted = Vec::with_capacity(leaf.sorted.len());
            let mut right_sorted = Vec::with_capacity(leaf.sorted.len());
            for rows in &leaf.sorted {
                let (l, r): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| goes_left[r as usize]);
                left_sorted.push(l);
                right_sorted.push(r);
            }
            let (gl, hl) = left_sorted[0].iter().fold((0.0, 0.0), |(g, h), &r| (g + self.grad[r as usize], h + self.hess[r as usize]));
            let (gr, hr) = (leaf.g - gl, leaf.h - hl);
            let (li, ri) = (nodes.len(), nodes.len() + 1);
            nodes.push(TreeNode::Leaf { value: -gl / (hl + lambda) });
            nodes.push(TreeNode::Leaf { value: -gr / (hr + lambda) });
            nodes[leaf.node] =
                TreeNode::Split { feature: split.feature, threshold: split.threshold, left: li, right: ri, gain: split.gain };
            n_leaves += 1;
            for (node, sorted, g, h) in [(li, left_sorted, gl, hl), (ri, right_sorted, gr, hr)] {
                let mut child = Leaf { node, depth: leaf.depth + 1, sorted, g, h, best: None };
                child.best = self.best_split(&child);
                push(child, &mut slots, &mut heap);
            }
        }
        Tree { features: self.features.to_vec(), nodes }
    }
}

impl GbtModel {
    /// Fits `params.n_estimators` trees. `weights` scale each row's gradient
    /// and hessian (e.g. class weights).
    pub fn fit(x: &[Vec<f64>], y: &[f64], weights: Option<&[f64]>, params: &GbtParams) -> Result<Self> {
        params.validate()?;
        if x.is_empty() {
            return Err(Error::InvalidInput("cannot fit on zero rows".into()));
        }
        if y.len() != x.len() || weights.is_some_and(|w| w.len() != x.len()) {
            return Err(Error::Shape(format!("{} rows, {} targets", x.len(), y.len())));
        }
        let nf = check_matrix(x, None)?;
        if nf == 0 {
            return Err(Error::InvalidInput("rows have no features".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite target".into()));
        }
        if params.objective == Objective::Logistic && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput("logistic targets must be 0 or 1".into()));
        }
        let w: Vec<f64> = weights.map_or_else(|| vec![1.0; x.len()], <[f64]>::to_vec);
        if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidInput("weights must be finite, non-negative and not all zero".into()));
        }

        let wsum: f64 = w.iter().sum();
        let mean = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / wsum;
        let base_score = match params.objective {
            Objective::Squared => mean,
            Objective::Logistic => {
                let p = mean.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                (p / (1.0 - p)).ln()
            }
        };

        let n = x.len();
        let presorted: Vec<Vec<u32>> = (0..nf)
            .map(|f| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| x[a as usize][f].total_cmp(&x[b as usize][f]).then(a.cmp(&b)));
                idx
            })
            .collect();
        let n_cols = ((params.colsample_bytree * nf as f64).round() as usize).clamp(1, nf);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut scores = vec![base_score; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut train_loss = vec![objective_loss(params.objective, &scores, y, &w)];
        let mut trees = Vec::with_capacity(params.n_estimators);
        let mut cols: Vec<usize> = (0..nf).collect();

        for _ in 0..params.n_estimators {
            for i in 0..n {
                let (g, h) = match params.objective {
                    Objective::Squared => (scores[i] - y[i], 1.0),
                    Objective::Logistic => {
                        let p = stable_sigmoid(scores[i]);
                        (p - y[i], p * (1.0 - p))
                    }
                };
                grad[i] = w[i] * g;
                hess[i] = w[i] * h;
            }
            cols.sort_unstable();
            cols.shuffle(&mut rng);
            let mut features = cols[..n_cols].to_vec();
            features.sort_unstable();
            let grower = Grower { x, grad: &grad, hess: &hess, features: &features, params };
            let tree = grower.grow(n, &presorted);
            for (s, row) in scores.iter_mut().zip(x) {
                *s += params.learning_rate * tree.leaf_value(row);
            }
            train_loss.push(objective_loss(params.objective, &scores, y, &w));
            trees.push(tree);
        }
        Ok(Self { format_version: GBT_FORMAT_VERSION, params: params.clone(), n_features: nf, base_score, trees, train_loss })
    }

    /// Sum of base score and scaled tree outputs.
    pub fn raw_score(&self, row: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| self.params.learning_rate * t.leaf_value(row)).sum::<f64>()
    }

    /// Probabilities (logistic) or raw scores (squared).
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_matrix(x, Some(self.n_features))?;
        Ok(x.iter()
            .map(|row| {
                let s = self.raw_score(row);
                match self.params.objective {
                    Objective::Logistic => stable_sigmoid(s),
                    Objective::Squared => s,
                }
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::Format(format!("bad model dump: {e}")))?;
        if m.format_version != GBT_FORMAT_VERSION {
            return Err(Error::Format(format!("unknown model format version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
