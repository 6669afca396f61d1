//! Greedy CART regression trees.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        prediction: f64,
    },
}

impl TreeNode {
    pub fn leaf(prediction: f64) -> Self {
        TreeNode::Leaf { prediction }
    }

    /// `x[feature] <= threshold` goes left.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { prediction } => return *prediction,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn max_feature(&self) -> Option<usize> {
        match self {
            TreeNode::Leaf { .. } => None,
            TreeNode::Split { feature, left, right, .. } => {
                [Some(*feature), left.max_feature(), right.max_feature()].into_iter().flatten().max()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features considered at each split; `None` means all.
    pub feature_subset: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { max_depth: 6, min_leaf: 1, feature_subset: None }
    }
}

/// Fits a regression tree on row-major features.
pub fn fit_tree<R: Rng + ?Sized>(x: &[Vec<f64>], y: &[f64], params: &TreeParams, rng: &mut R) -> Result<TreeNode> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyData);
    }
    if x.len() != y.len() {
        return Err(Error::invalid("y", format!("{} targets for {} rows", y.len(), x.len())));
    }
    let n_features = x[0].len();
    if x.iter().any(|row| row.len() != n_features) {
        return Err(Error::invalid("x", "ragged feature rows"));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    let params = TreeParams { min_leaf: params.min_leaf.max(1), ..*params };
    Ok(grow(x, y, &mut idx, 0, &params, n_features, rng))
}

fn mean_sse(y: &[f64], idx: &[usize]) -> (f64, f64) {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    let sse = idx.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    (mean, sse)
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    sse: f64,
}

fn grow<R: Rng + ?Sized>(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &mut [usize],
    depth: usize,
    params: &TreeParams,
    n_features: usize,
    rng: &mut R,
) -> TreeNode {
    let (mean, sse) = mean_sse(y, idx);
    if depth >= params.max_depth || idx.len() < 2 * params.min_leaf || sse <= 1e-24 {
        return TreeNode::leaf(mean);
    }

    let mut features: Vec<usize> = match params.feature_subset {
        Some(k) if k < n_features => index::sample(rng, n_features, k.max(1)).into_vec(),
        _ => (0..n_features).collect(),
    };
    features.sort_unstable();

    let mut best: Option<BestSplit> = None;
    let mut order: Vec<usize> = idx.to_vec();
    for &f in &features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        // Centering on the node mean keeps the prefix-sum SSE well conditioned.
        let n = order.len();
        let total: f64 = order.iter().map(|&i| y[i] - mean).sum();
        let total_sq: f64 = order.iter().map(|&i| (y[i] - mean).powi(2)).sum();
        let (mut s, mut sq) = (0.0, 0.0);
        for pos in 0..n - 1 {
            let v = y[order[pos]] - mean;
            s += v;
            sq += v * v;
            let n_left = pos + 1;
            let n_right = n - n_left;
            if n_left < params.min_leaf || n_right < params.min_leaf {
                continue;
            }
            let (lo, hi) = (x[order[pos]][f], x[order[pos + 1]][f]);
            if lo >= hi {
                continue;
            }
            let left_sse = sq - s * s / n_left as f64;
            let right_sse = (total_sq - sq) - (total - s).powi(2) / n_right as f64;
            let cand = (left_sse + right_sse).max(0.0);
            let better = match &best {
                None => true,
                Some(b) => cand < b.sse - 1e-12 * (1.0 + b.sse),
            };
            if better {
                best = Some(BestSplit { feature: f, threshold: 0.5 * (lo + hi), sse: cand });
            }
        }
    }

    let Some(best) = best else {
        return TreeNode::leaf(mean);
    };
    let mut split_at = 0;
    for i in 0..idx.len() {
        if x[idx[i]][best.feature] <= best.threshold {
            idx.swap(i, split_at);
            split_at += 1;
        }
    }
    let (left_idx, right_idx) = idx.split_at_mut(split_at);
    let left = grow(x, y, left_idx, depth + 1, params, n_features, rng);
    let right = grow(x, y, right_idx, depth + 1, params, n_features, rng);
    TreeNode::Split { feature: best.feature, threshold: best.threshold, left: Box::new(left), right: Box::new(right) }
}
