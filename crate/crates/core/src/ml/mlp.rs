//! One-hidden-layer perceptron (ReLU hidden units, logistic outputs) trained by
//! backpropagation on mean binary cross-entropy to imitate the rule controller.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{schema_row, Matrix, Standardizer};
use crate::error::{Error, Result};
use crate::preprocess::FeatureFrame;
use crate::sim::Device;

/// Output units in device order.
pub const N_OUTPUTS: usize = 5;
/// Inputs the imitation network sees by default.
pub const IMITATION_FEATURES: [&str; 3] = ["level", "temp", "humidity"];

pub fn equipment_target(d: Device) -> String {
    format!("cmd_{}", d.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub feature_names: Vec<String>,
    pub scaler: Standardizer,
    /// `[n_in, n_hidden, n_out]`.
    pub sizes: [usize; 3],
    /// Row-major `n_hidden × n_in`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `n_out × n_hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of a logit against a 0/1 target, computed without overflow.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl MlpModel {
    /// He-initialized network over `feature_names`.
    pub fn init<R: Rng + ?Sized>(feature_names: Vec<String>, scaler: Standardizer, n_hidden: usize, rng: &mut R) -> Self {
        let n_in = feature_names.len();
        let n1 = Normal::new(0.0, (2.0 / n_in.max(1) as f64).sqrt()).expect("finite sigma");
        let n2 = Normal::new(0.0, (1.0 / n_hidden.max(1) as f64).sqrt()).expect("finite sigma");
        MlpModel {
            feature_names,
            scaler,
            sizes: [n_in, n_hidden, N_OUTPUTS],
            w1: (0..n_hidden * n_in).map(|_| n1.sample(rng)).collect(),
            b1: vec![0.0; n_hidden],
            w2: (0..N_OUTPUTS * n_hidden).map(|_| n2.sample(rng)).collect(),
            b2: vec![0.0; N_OUTPUTS],
        }
    }

    /// Network with every parameter zero.
    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        MlpModel {
            feature_names: (0..n_in).map(|i| format!("x{i}")).collect(),
            scaler: Standardizer::identity(n_in),
            sizes: [n_in, n_hidden, n_out],
            w1: vec![0.0; n_hidden * n_in],
            b1: vec![0.0; n_hidden],
            w2: vec![0.0; n_out * n_hidden],
            b2: vec![0.0; n_out],
        }
    }

    fn hidden(&self, z: &[f64]) -> Vec<f64> {
        let [n_in, n_h, _] = self.sizes;
        (0..n_h)
            .map(|j| {
                let row = &self.w1[j * n_in..(j + 1) * n_in];
                (row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.b1[j]).max(0.0)
            })
            .collect()
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let [_, n_h, n_out] = self.sizes;
        (0..n_out)
            .map(|k| self.w2[k * n_h..(k + 1) * n_h].iter().zip(h).map(|(w, a)| w * a).sum::<f64>() + self.b2[k])
            .collect()
    }

    /// Output probabilities for an already-standardized input.
    pub fn forward_scaled(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.sizes[0] {
            return Err(Error::Schema(format!("expected {} inputs, got {}", self.sizes[0], z.len())));
        }
        Ok(self.logits(&self.hidden(z)).into_iter().map(logistic).collect())
    }

    /// Mean BCE (over rows and outputs) and its gradient, for standardized inputs.
    pub fn loss_and_grad(&self, z: &[&[f64]], y: &[&[f64]]) -> (f64, MlpGrad) {
        let [n_in, n_h, n_out] = self.sizes;
        let mut g = MlpGrad {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; n_h],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; n_out],
        };
        let scale = 1.0 / (z.len() * n_out) as f64;
        let mut loss = 0.0;
        let mut dh = vec![0.0; n_h];
        for (x, t) in z.iter().zip(y) {
            let h = self.hidden(x);
            let logits = self.logits(&h);
            dh.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..n_out {
                loss += bce_from_logit(logits[k], t[k]);
                let dz = (logistic(logits[k]) - t[k]) * scale;
                g.b2[k] += dz;
                for j in 0..n_h {
                    g.w2[k * n_h + j] += dz * h[j];
                    dh[j] += dz * self.w2[k * n_h + j];
                }
            }
            for j in 0..n_h {
                if h[j] <= 0.0 {
                    continue;
                }
                g.b1[j] += dh[j];
                for i in 0..n_in {
                    g.w1[j * n_in + i] += dh[j] * x[i];
                }
            }
        }
        (loss * scale, g)
    }

    pub fn loss(&self, z: &[&[f64]], y: &[&[f64]]) -> f64 {
        let n_out = self.sizes[2];
        let mut loss = 0.0;
        for (x, t) in z.iter().zip(y) {
            let logits = self.logits(&self.hidden(x));
            loss += logits.iter().zip(t.iter()).map(|(l, yy)| bce_from_logit(*l, *yy)).sum::<f64>();
        }
        loss / (z.len() * n_out) as f64
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

impl MlpGrad {
    fn parts(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Probabilities for a raw feature vector of length `n_in`.
pub fn mlp_forward(model: &MlpModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.sizes[0] {
        return Err(Error::Schema(format!("expected {} inputs, got {}", model.sizes[0], x.len())));
    }
    model.forward_scaled(&model.scaler.transform(x))
}

/// Equipment probabilities for a frame.
pub fn mlp_frame(model: &MlpModel, frame: &FeatureFrame) -> Result<Vec<f64>> {
    mlp_forward(model, &schema_row(frame, &model.feature_names)?)
}

/// A probability of exactly 0.5 means off.
pub fn action(p: f64) -> bool {
    p > 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpParams {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mini-batch size; 0 means full batch.
    pub batch: usize,
    pub optimizer: Optimizer,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams { hidden: 16, epochs: 300, learning_rate: 0.01, batch: 64, optimizer: Optimizer::Adam }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpFit {
    pub model: MlpModel,
    /// Full-data loss before training and after every epoch.
    pub loss_history: Vec<f64>,
}

/// Behavior cloning of 0/1 equipment labels.
pub fn fit_mlp_imitation<R: Rng + ?Sized>(
    x: &Matrix,
    y: &Matrix,
    feature_names: Vec<String>,
    params: &MlpParams,
    rng: &mut R,
) -> Result<MlpFit> {
    if x.is_empty() {
        return Err(Error::EmptyData);
    }
    if x.len() != y.len() || y.iter().any(|r| r.len() != N_OUTPUTS) {
        return Err(Error::invalid("y", "five equipment labels per row required"));
    }
    if x.iter().any(|r| r.len() != feature_names.len()) {
        return Err(Error::Schema("row width differs from feature names".into()));
    }
    let scaler = Standardizer::fit(x);
    let z: Matrix = x.iter().map(|r| scaler.transform(r)).collect();
    let mut model = MlpModel::init(feature_names, scaler, params.hidden.max(1), rng);

    let zr: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
    let mut history = vec![model.loss(&zr, &yr)];

    let n = z.len();
    let batch = if params.batch == 0 { n } else { params.batch.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let sizes: Vec<usize> = model.params_mut().iter().map(|p| p.len()).collect();
    let mut m1: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut m2 = m1.clone();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut step = 0i32;

    for _ in 0..params.epochs {
        if batch < n {
            order.shuffle(rng);
        }
        for chunk in order.chunks(batch) {
            let bz: Vec<&[f64]> = chunk.iter().map(|&i| zr[i]).collect();
            let by: Vec<&[f64]> = chunk.iter().map(|&i| yr[i]).collect();
            let (_, grad) = model.loss_and_grad(&bz, &by);
            step += 1;
            for (pi, (param, g)) in model.params_mut().into_iter().zip(grad.parts()).enumerate() {
                match params.optimizer {
                    Optimizer::Sgd => {
                        for (p, gv) in param.iter_mut().zip(g) {
                            *p -= params.learning_rate * gv;
                        }
                    }
                    Optimizer::Adam => {
                        let c1 = 1.0 - beta1.powi(step);
                        let c2 = 1.0 - beta2.powi(step);
                        for ((p, gv), (a, b)) in param.iter_mut().zip(g).zip(m1[pi].iter_mut().zip(m2[pi].iter_mut())) {
                            *a = beta1 * *a + (1.0 - beta1) * gv;
                            *b = beta2 * *b + (1.0 - beta2) * gv * gv;
                            *p -= params.learning_rate * (*a / c1) / ((*b / c2).sqrt() + eps);
                        }
                    }
                }
            }
        }
        history.push(model.loss(&zr, &yr));
    }
    if !model.is_finite() {
        return Err(Error::invalid("learning_rate", "training diverged to non-finite parameters"));
    }
    Ok(MlpFit { model, loss_history: history })
}
