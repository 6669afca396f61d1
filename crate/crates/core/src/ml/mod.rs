//! Learners trained on simulated data: setpoint forest, disease SVM, feeding
//! GBM and an imitation MLP, plus the bundle that ties them to a feature schema.

pub mod arbitrate;
pub mod bundle;
pub mod forest;
pub mod gbm;
pub mod labels;
pub mod mlp;
pub mod svm;
pub mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::FeatureFrame;

/// Row-major feature matrix.
pub type Matrix = Vec<Vec<f64>>;

/// Extracts `names` from a frame in order.
pub fn schema_row(frame: &FeatureFrame, names: &[String]) -> Result<Vec<f64>> {
    names
        .iter()
        .map(|n| frame.feature(n).ok_or_else(|| Error::Schema(format!("frame lacks feature {n:?}"))))
        .collect()
}

/// Per-column mean/std frozen from training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Zero-variance columns keep unit scale.
    pub fn fit(x: &Matrix) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}
