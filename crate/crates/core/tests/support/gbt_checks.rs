//! Stump oracle and structural checks for the boosted trees.
#![allow(dead_code)]

use i2e_core::gbt::{GbtModel, GbtParams, Objective, TreeNode};
use i2e_core::tensor_nn::stable_sigmoid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::best_stump;

fn instance(seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(2..=64);
    let nf = r.random_range(1..=4);
    let discrete = seed % 2 == 0;
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..nf)
                .map(|_| if discrete { r.random_range(0..5) as f64 } else { r.random_range(-3.0..3.0) })
                .collect()
        })
        .collect();
    let y = x.iter().map(|row| row[0].sin() + r.random_range(-0.5..0.5)).collect();
    (x, y)
}

fn split_gain(x: &[Vec<f64>], g: &[f64], f: usize, thr: f64, lambda: f64) -> f64 {
    let (mut gl, mut nl, mut gr, mut nr) = (0.0, 0.0, 0.0, 0.0);
    for (row, gi) in x.iter().zip(g) {
        if row[f] < thr {
            gl += gi;
            nl += 1.0;
        } else {
            gr += gi;
            nr += 1.0;
        }
    }
    let gs = gl + gr;
    0.5 * (gl * gl / (nl + lambda) + gr * gr / (nr + lambda) - gs * gs / (nl + nr + lambda))
}

/// A single depth-1 tree against the exhaustive best stump.
pub fn stump_matches(seed: u64) -> Result<(), String> {
    let (x, y) = instance(seed);
    let params = GbtParams {
        n_estimators: 1,
        learning_rate: 1.0,
        max_depth: 1,
        colsample_bytree: 1.0,
        objective: Objective::Squared,
        seed,
        ..GbtParams::default()
    };
    let m = GbtModel::fit(&x, &y, None, &params).map_err(|e| e.to_string())?;
    let tree = &m.trees[0];
    let want = best_stump(&x, &y, m.base_score, params.lambda, params.min_child_weight);
    match (&tree.nodes[0], want) {
        (TreeNode::Leaf { value }, None) => {
            if value.abs() > 1e-9 {
                return Err(format!("seed {seed}: root leaf {value}, expected ~0"));
            }
        }
        (TreeNode::Split { feature, threshold, left, right, .. }, Some((f, t, lv, rv))) => {
            let (TreeNode::Leaf { value: a }, TreeNode::Leaf { value: b }) = (&tree.nodes[*left], &tree.nodes[*right])
            else {
                return Err(format!("seed {seed}: stump children are not leaves"));
            };
            if (*feature, *threshold) == (f, t) {
                if (a - lv).abs() > 1e-9 || (b - rv).abs() > 1e-9 {
                    return Err(format!("seed {seed}: leaves ({a}, {b}) vs ({lv}, {rv})"));
                }
            } else {
                let g: Vec<f64> = y.iter().map(|t| m.base_score - t).collect();
                let got = split_gain(&x, &g, *feature, *threshold, params.lambda);
                let best = split_gain(&x, &g, f, t, params.lambda);
                if (got - best).abs() > 1e-9 * best.abs().max(1.0) {
                    return Err(format!("seed {seed}: split ({feature}, {threshold}) gain {got} < best {best}"));
                }
            }
        }
        (node, want) => return Err(format!("seed {seed}: got {node:?}, oracle {want:?}")),
    }
    Ok(())
}

pub fn classification_data(n: usize, nf: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..nf).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let y = x
        .iter()
        .map(|row| {
            let z = 2.0 * row[0] - row[1] + row[2] * row[3] * 3.0;
            f64::from(r.random::<f64>() < stable_sigmoid(z))
        })
        .collect();
    (x, y)
}

fn leaf_of(nodes: &[TreeNode], row: &[f64]) -> usize {
    let mut i = 0;
    while let TreeNode::Split { feature, threshold, left, right, .. } = &nodes[i] {
        i = if row[*feature] < *threshold { *left } else { *right };
    }
    i
}

/// Defaults: loss never rises, and depth, leaf, column and child-weight caps hold.
pub fn defaults_are_monotone_and_capped(seed: u64) -> Result<(), String> {
    let (x, y) = classification_data(1500, 15, seed);
    let params = GbtParams { seed, ..GbtParams::default() };
    let m = GbtModel::fit(&x, &y, None, &params).map_err(|e| e.to_string())?;
    if m.trees.len() != params.n_estimators {
        return Err(format!("{} trees", m.trees.len()));
    }
    for (i, w) in m.train_loss.windows(2).enumerate() {
        if w[1] > w[0] + 1e-12 * w[0].abs() {
            return Err(format!("loss rose at round {}: {} -> {}", i + 1, w[0], w[1]));
        }
    }
    let n_cols = (params.colsample_bytree * 15.0).round() as usize;
    let mut scores = vec![m.base_score; x.len()];
    for (ti, tree) in m.trees.iter().enumerate() {
        if tree.depth() > params.max_depth || tree.n_leaves() > params.max_leaves {
            return Err(format!("tree {ti}: depth {} leaves {}", tree.depth(), tree.n_leaves()));
        }
        if tree.features.len() != n_cols {
            return Err(format!("tree {ti}: {} sampled columns", tree.features.len()));
        }
        for node in &tree.nodes {
            if let TreeNode::Split { feature, .. } = node {
                if !tree.features.contains(feature) {
                    return Err(format!("tree {ti}: split on unsampled column {feature}"));
                }
            }
        }
        let mut hess = vec![0.0; tree.nodes.len()];
        for (row, s) in x.iter().zip(&scores) {
            let p = stable_sigmoid(*s);
            hess[leaf_of(&tree.nodes, row)] += p * (1.0 - p);
        }
        for (i, node) in tree.nodes.iter().enumerate() {
            if matches!(node, TreeNode::Leaf { .. }) && tree.nodes.len() > 1 && hess[i] < params.min_child_weight {
                return Err(format!("tree {ti}: leaf {i} hessian {}", hess[i]));
            }
        }
        for (s, row) in scores.iter_mut().zip(&x) {
            *s += params.learning_rate * tree.leaf_value(row);
        }
    }
    Ok(())
}
