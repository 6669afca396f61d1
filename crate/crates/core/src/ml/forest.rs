//! Bagged regression forests with per-split feature subsampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree, TreeNode, TreeParams};
use super::{schema_row, Matrix};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::preprocess::FeatureFrame;
use crate::rng::{self, Stream};

pub const TEMP_SETPOINT: &str = "temp_setpoint_c";
pub const PH_SETPOINT: &str = "ph_setpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestOutput {
    pub target: String,
    pub trees: Vec<TreeNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub feature_names: Vec<String>,
    pub n_features_per_split: usize,
    pub outputs: Vec<ForestOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Draw a bootstrap sample per tree; when off every tree sees all rows.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 50, max_depth: 6, min_leaf: 2, bootstrap: true, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoints {
    pub temp_setpoint_c: f64,
    pub ph_setpoint: f64,
}

/// Fits one forest per named target on the same feature matrix.
pub fn fit_random_forest(
    x: &Matrix,
    targets: &[(&str, &[f64])],
    feature_names: Vec<String>,
    params: &ForestParams,
    mode: ExecMode,
) -> Result<ForestModel> {
    if params.n_trees == 0 {
        return Err(Error::invalid("n_trees", "must be at least 1"));
    }
    if x.is_empty() {
        return Err(Error::EmptyData);
    }
    let n_features = x[0].len();
    if n_features != feature_names.len() {
        return Err(Error::Schema(format!("{} feature names for {n_features} columns", feature_names.len())));
    }
    let per_split = (n_features as f64).sqrt().ceil().max(1.0) as usize;
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        feature_subset: Some(per_split),
    };
    let mut outputs = Vec::with_capacity(targets.len());
    for (t, (name, y)) in targets.iter().enumerate() {
        if y.len() != x.len() {
            return Err(Error::invalid("targets", format!("target {name} has {} values for {} rows", y.len(), x.len())));
        }
        let trees = exec::try_map_indices(mode, params.n_trees, |i| {
            let mut rng = rng::indexed(params.seed, Stream::Training, (t * params.n_trees + i) as u64);
            if params.bootstrap {
                let n = x.len();
                let (bx, by): (Vec<Vec<f64>>, Vec<f64>) = (0..n)
                    .map(|_| {
                        let j = rng.random_range(0..n);
                        (x[j].clone(), y[j])
                    })
                    .unzip();
                fit_tree(&bx, &by, &tree_params, &mut rng)
            } else {
                fit_tree(x, y, &tree_params, &mut rng)
            }
        })?;
        outputs.push(ForestOutput { target: name.to_string(), trees });
    }
    Ok(ForestModel { feature_names, n_features_per_split: per_split, outputs })
}

impl ForestModel {
    /// Equal-weight mean of the trees of every output.
    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        self.outputs
            .iter()
            .map(|o| o.trees.iter().map(|t| t.predict(x)).sum::<f64>() / o.trees.len() as f64)
            .collect()
    }

    pub fn predict_target(&self, target: &str, x: &[f64]) -> Result<f64> {
        let o = self
            .outputs
            .iter()
            .find(|o| o.target == target)
            .ok_or_else(|| Error::Schema(format!("forest has no output {target:?}")))?;
        Ok(o.trees.iter().map(|t| t.predict(x)).sum::<f64>() / o.trees.len() as f64)
    }
}

/// Temperature and pH setpoints for a frame.
pub fn predict_setpoints(model: &ForestModel, frame: &FeatureFrame) -> Result<Setpoints> {
    let x = schema_row(frame, &model.feature_names)?;
    Ok(Setpoints {
        temp_setpoint_c: model.predict_target(TEMP_SETPOINT, &x)?,
        ph_setpoint: model.predict_target(PH_SETPOINT, &x)?,
    })
}
