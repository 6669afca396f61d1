//! Gradient-boosted regression trees under squared loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree, TreeNode, TreeParams};
use super::{schema_row, Matrix};
use crate::error::{Error, Result};
use crate::preprocess::FeatureFrame;

pub const FEED: &str = "feed_g_per_tick";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmStage {
    pub tree: TreeNode,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub feature_names: Vec<String>,
    pub init_value: f64,
    pub stages: Vec<GbmStage>,
    pub target: String,
    /// Training MSE after 0, 1, …, n stages.
    #[serde(default)]
    pub train_mse: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbmParams {
    pub n_stages: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams { n_stages: 100, learning_rate: 0.1, max_depth: 2, min_leaf: 1 }
    }
}

fn mse(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

pub fn fit_gbm(x: &Matrix, y: &[f64], feature_names: Vec<String>, params: &GbmParams) -> Result<GbmModel> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyData);
    }
    if x.len() != y.len() {
        return Err(Error::invalid("y", "one target per row required"));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
        return Err(Error::invalid("learning_rate", "must lie in (0, 1]"));
    }
    let init = y.iter().sum::<f64>() / y.len() as f64;
    let mut pred = vec![init; y.len()];
    let mut history = vec![mse(y, &pred)];
    let tree_params = TreeParams { max_depth: params.max_depth, min_leaf: params.min_leaf, feature_subset: None };
    // Trees without feature subsampling never touch the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stages = Vec::with_capacity(params.n_stages);
    for _ in 0..params.n_stages {
        let residual: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let tree = fit_tree(x, &residual, &tree_params, &mut rng)?;
        for (p, row) in pred.iter_mut().zip(x) {
            *p += params.learning_rate * tree.predict(row);
        }
        let m = mse(y, &pred);
        let prev = *history.last().expect("initial entry");
        assert!(m <= prev + 1e-9 * (1.0 + prev), "boosting stage increased training MSE: {prev} -> {m}");
        history.push(m);
        stages.push(GbmStage { tree, learning_rate: params.learning_rate });
    }
    Ok(GbmModel { feature_names, init_value: init, stages, target: FEED.to_string(), train_mse: history })
}

impl GbmModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.init_value + self.stages.iter().map(|s| s.learning_rate * s.tree.predict(x)).sum::<f64>()
    }
}

/// Unclamped feed proposal; arbitration applies the feed limits.
pub fn predict_feed(model: &GbmModel, frame: &FeatureFrame) -> Result<f64> {
    Ok(model.predict_row(&schema_row(frame, &model.feature_names)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(xs: &[f64]) -> Matrix {
        xs.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn constant_target() {
        let m = fit_gbm(&rows(&[1.0, 2.0, 3.0]), &[5.0; 3], vec!["x".into()], &GbmParams { n_stages: 5, ..Default::default() })
            .unwrap();
        assert_eq!(m.predict_row(&[10.0]), 5.0);
        assert!(m.stages.iter().all(|s| s.tree == TreeNode::leaf(0.0)));
    }

    #[test]
    fn zero_stages_predict_mean() {
        let m = fit_gbm(&rows(&[1.0, 2.0]), &[1.0, 3.0], vec!["x".into()], &GbmParams { n_stages: 0, ..Default::default() })
            .unwrap();
        assert_eq!(m.predict_row(&[7.0]), 2.0);
    }

    #[test]
    fn single_stump_fits_step() {
        // Residuals around the mean 5 are -5, -5, 5, 5; the best stump splits at 2.5.
        let p = GbmParams { n_stages: 1, learning_rate: 1.0, max_depth: 1, min_leaf: 1 };
        let m = fit_gbm(&rows(&[1.0, 2.0, 3.0, 4.0]), &[0.0, 0.0, 10.0, 10.0], vec!["x".into()], &p).unwrap();
        assert_eq!(m.init_value, 5.0);
        assert!(matches!(m.stages[0].tree, TreeNode::Split { threshold, .. } if threshold == 2.5));
        let preds: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|&x| m.predict_row(&[x])).collect();
        assert_eq!(preds, vec![0.0, 0.0, 10.0, 10.0]);
    }

    #[test]
    fn hand_built_prediction() {
        let mut m = GbmModel { feature_names: vec!["x".into()], init_value: 3.0, stages: vec![], target: FEED.into(), train_mse: vec![] };
        assert_eq!(m.predict_row(&[0.0]), 3.0);
        m.stages.push(GbmStage {
            tree: TreeNode::Split {
                feature: 0,
                threshold: 0.0,
                left: Box::new(TreeNode::leaf(-1.0)),
                right: Box::new(TreeNode::leaf(1.0)),
            },
            learning_rate: 0.5,
        });
        assert_eq!(m.predict_row(&[-1.0]), 2.5);
    }

    #[test]
    fn mse_history_non_increasing() {
        let xs: Vec<f64> = (0..60).map(|i| i as f64 / 6.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin() * 3.0 + 0.1 * x).collect();
        let m = fit_gbm(&rows(&xs), &ys, vec!["x".into()], &GbmParams::default()).unwrap();
        assert_eq!(m.train_mse.len(), 101);
        assert!(m.train_mse.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn bad_learning_rate() {
        let p = GbmParams { learning_rate: 0.0, ..Default::default() };
        assert!(fit_gbm(&rows(&[1.0]), &[1.0], vec!["x".into()], &p).is_err());
    }
}
