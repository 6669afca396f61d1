//! Linear soft-margin SVM trained by stochastic subgradient descent on the
//! regularized hinge objective, with step size 1/(lambda * t).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{schema_row, Matrix, Standardizer};
use crate::error::{Error, Result};
use crate::preprocess::FeatureFrame;

pub const DISEASED: &str = "diseased";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub feature_names: Vec<String>,
    pub scaler: Standardizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams { lambda: 0.01, epochs: 50 }
    }
}

/// `+1` = affected, `-1` = healthy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthPrediction {
    pub label: i8,
    pub score: f64,
}

/// λ/2·‖w‖² + mean hinge loss over already-standardized rows.
pub fn objective(w: &[f64], b: f64, x: &Matrix, y: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let hinge = x
        .iter()
        .zip(y)
        .map(|(row, yi)| (1.0 - yi * (dot(w, row) + b)).max(0.0))
        .sum::<f64>()
        / x.len() as f64;
    reg + hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains on raw rows; standardization statistics come from `x` and are stored in the model.
pub fn fit_linear_svm<R: Rng + ?Sized>(
    x: &Matrix,
    y: &[f64],
    feature_names: Vec<String>,
    params: &SvmParams,
    rng: &mut R,
) -> Result<SvmModel> {
    if x.is_empty() {
        return Err(Error::EmptyData);
    }
    if x.len() != y.len() {
        return Err(Error::invalid("y", "one label per row required"));
    }
    if y.iter().any(|v| *v != 1.0 && *v != -1.0) {
        return Err(Error::invalid("y", "labels must be +1 or -1"));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::SingleClass);
    }
    if !(params.lambda > 0.0) {
        return Err(Error::invalid("lambda", "must be positive"));
    }
    let scaler = Standardizer::fit(x);
    let xs: Matrix = x.iter().map(|r| scaler.transform(r)).collect();
    let (weights, bias) = pegasos(&xs, y, params, rng);
    Ok(SvmModel { weights, bias, lambda: params.lambda, feature_names, scaler })
}

/// Returns the lowest-objective point among the epoch-end iterates and their running averages.
fn pegasos<R: Rng + ?Sized>(x: &Matrix, y: &[f64], params: &SvmParams, rng: &mut R) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let n = x.len();
    let lambda = params.lambda;
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut avg_w = vec![0.0; d];
    let mut avg_b = 0.0;
    let mut best = (w.clone(), b, objective(&w, b, x, y, lambda));
    let mut t = 0u64;
    for _ in 0..params.epochs {
        for _ in 0..n {
            t += 1;
            let i = rng.random_range(0..n);
            let eta = 1.0 / (lambda * t as f64);
            let margin = y[i] * (dot(&w, &x[i]) + b);
            for v in w.iter_mut() {
                *v *= 1.0 - eta * lambda;
            }
            if margin < 1.0 {
                for (v, xi) in w.iter_mut().zip(&x[i]) {
                    *v += eta * y[i] * xi;
                }
                b += eta * y[i];
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                let s = radius / norm;
                w.iter_mut().for_each(|v| *v *= s);
            }
            let k = t as f64;
            for (a, v) in avg_w.iter_mut().zip(&w) {
                *a += (v - *a) / k;
            }
            avg_b += (b - avg_b) / k;
        }
        for (cw, cb) in [(&w, b), (&avg_w, avg_b)] {
            let obj = objective(cw, cb, x, y, lambda);
            if obj < best.2 {
                best = (cw.clone(), cb, obj);
            }
        }
    }
    (best.0, best.1)
}

impl SvmModel {
    /// Margin score of a raw (unstandardized) row.
    pub fn score_row(&self, x: &[f64]) -> f64 {
        dot(&self.weights, &self.scaler.transform(x)) + self.bias
    }

    /// Score 0 maps to healthy.
    pub fn classify_row(&self, x: &[f64]) -> HealthPrediction {
        let score = self.score_row(x);
        HealthPrediction { label: if score > 0.0 { 1 } else { -1 }, score }
    }

    /// Objective of the trained parameters on raw rows, in standardized space.
    pub fn objective_on(&self, x: &Matrix, y: &[f64]) -> f64 {
        let xs: Matrix = x.iter().map(|r| self.scaler.transform(r)).collect();
        objective(&self.weights, self.bias, &xs, y, self.lambda)
    }
}

pub fn predict_health(model: &SvmModel, frame: &FeatureFrame) -> Result<HealthPrediction> {
    Ok(model.classify_row(&schema_row(frame, &model.feature_names)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_model(w: Vec<f64>, b: f64) -> SvmModel {
        let d = w.len();
        SvmModel {
            weights: w,
            bias: b,
            lambda: 0.1,
            feature_names: (0..d).map(|i| format!("f{i}")).collect(),
            scaler: Standardizer::identity(d),
        }
    }

    #[test]
    fn sign_and_tie_rule() {
        let m = identity_model(vec![1.0, 0.0], 0.0);
        assert_eq!(m.classify_row(&[2.0, 0.0]), HealthPrediction { label: 1, score: 2.0 });
        assert_eq!(m.classify_row(&[-2.0, 0.0]).label, -1);
        assert_eq!(m.classify_row(&[0.0, 5.0]), HealthPrediction { label: -1, score: 0.0 });
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        let r = fit_linear_svm(&x, &[1.0, 1.0], vec!["a".into()], &SvmParams::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::SingleClass)));
    }

    #[test]
    fn negated_labels_flip_predictions() {
        let x: Matrix = vec![vec![0.0, 0.0], vec![2.0, 2.0], vec![0.5, 0.0], vec![2.0, 1.5]];
        let y = [-1.0, 1.0, -1.0, 1.0];
        let ny: Vec<f64> = y.iter().map(|v| -v).collect();
        let p = SvmParams { lambda: 0.1, epochs: 500 };
        let names = vec!["a".to_string(), "b".to_string()];
        let a = fit_linear_svm(&x, &y, names.clone(), &p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = fit_linear_svm(&x, &ny, names, &p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for row in &x {
            assert_eq!(a.classify_row(row).label, -b.classify_row(row).label);
        }
    }

    #[test]
    fn positive_rescaling_keeps_labels() {
        let m = identity_model(vec![0.7, -1.3], 0.2);
        let scaled = identity_model(vec![0.7 * 5.0, -1.3 * 5.0], 0.2 * 5.0);
        for row in [[0.0, 0.0], [1.0, 2.0], [-3.0, 0.5], [4.0, 1.0]] {
            assert_eq!(m.classify_row(&row).label, scaled.classify_row(&row).label);
        }
    }
}
