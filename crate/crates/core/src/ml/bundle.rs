//! Trained-model bundle: training, proposal, evaluation and serialization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arbitrate::MlProposal;
use super::forest::{fit_random_forest, predict_setpoints, ForestModel, ForestParams, PH_SETPOINT, TEMP_SETPOINT};
use super::gbm::{fit_gbm, predict_feed, GbmModel, GbmParams, FEED};
use super::labels::{imitation_heldout_grid, imitation_training_grid};
use super::mlp::{action, equipment_target, fit_mlp_imitation, mlp_forward, mlp_frame, MlpModel, MlpParams, IMITATION_FEATURES};
use super::svm::{fit_linear_svm, predict_health, SvmModel, SvmParams, DISEASED};
use super::{schema_row, Matrix};
use crate::control::ControlConfig;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::preprocess::{Dataset, FeatureFrame, SplitTag};
use crate::rng::{self, Stream};
use crate::sim::Device;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlConfig {
    pub seed: u64,
    pub forest: ForestParams,
    pub svm: SvmParams,
    pub gbm: GbmParams,
    pub mlp: MlpParams,
    /// Add the rule-labeled threshold grid to the imitation training rows.
    pub imitation_grid: bool,
}

impl Default for MlConfig {
    fn default() -> Self {
        MlConfig {
            seed: 11,
            forest: ForestParams::default(),
            svm: SvmParams::default(),
            gbm: GbmParams::default(),
            mlp: MlpParams::default(),
            imitation_grid: true,
        }
    }
}

/// Rates with an empty denominator are NaN; JSON writes them as null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: Option<SplitTag>,
    pub n_frames: usize,
    #[serde(deserialize_with = "null_as_nan")]
    pub forest_test_mse: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub forest_baseline_mse: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub forest_ph_test_mse: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub forest_ph_baseline_mse: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub svm_accuracy: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub svm_recall: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub svm_false_positive_rate: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub gbm_test_mse: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub gbm_baseline_mse: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub mlp_agreement: f64,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub dataset_hash: String,
    pub n_train: usize,
    pub gbm_stage_mse: Vec<f64>,
    pub mlp_loss_history: Vec<f64>,
    pub mlp_grid_agreement: f64,
    pub svm_train_objective: f64,
    pub test: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBundle {
    pub format_version: u32,
    pub forest: Option<ForestModel>,
    pub svm: Option<SvmModel>,
    pub gbm: Option<GbmModel>,
    pub mlp: Option<MlpModel>,
    pub metadata: Option<TrainingMetadata>,
}

impl Default for ModelBundle {
    fn default() -> Self {
        ModelBundle { format_version: FORMAT_VERSION, forest: None, svm: None, gbm: None, mlp: None, metadata: None }
    }
}

/// Training-metrics report written next to a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mse: BTreeMap<String, f64>,
    pub accuracy: BTreeMap<String, f64>,
    pub agreement: BTreeMap<String, f64>,
    pub gbm_stage_mse: Vec<f64>,
    pub seed: u64,
    pub dataset_hash: String,
}

/// SHA-256 of the dataset's JSONL encoding.
pub fn dataset_hash(ds: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

fn design(ds: &Dataset, names: &[String]) -> Result<Matrix> {
    ds.frames.iter().map(|f| schema_row(f, names)).collect()
}

fn column(ds: &Dataset, target: &str) -> Result<Vec<f64>> {
    (0..ds.len()).map(|i| ds.target(i, target)).collect()
}

fn equipment_labels(ds: &Dataset) -> Result<Matrix> {
    (0..ds.len())
        .map(|i| Device::ALL.iter().map(|&d| ds.target(i, &equipment_target(d))).collect())
        .collect()
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    if y.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fits all four models on the train split.
pub fn train_bundle(ds: &Dataset, cfg: &MlConfig, control: &ControlConfig, mode: ExecMode) -> Result<(ModelBundle, TrainReport)> {
    for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
        if ds.count(tag) == 0 {
            return Err(Error::invalid("dataset", format!("{tag:?} split is empty")));
        }
    }
    let train = ds.subset(SplitTag::Train);
    let names = train.frames[0].feature_names();
    let x = design(&train, &names)?;

    let temp_y = column(&train, TEMP_SETPOINT)?;
    let ph_y = column(&train, PH_SETPOINT)?;
    let forest_params = ForestParams { seed: cfg.forest.seed ^ cfg.seed, ..cfg.forest };
    let forest = fit_random_forest(
        &x,
        &[(TEMP_SETPOINT, &temp_y), (PH_SETPOINT, &ph_y)],
        names.clone(),
        &forest_params,
        mode,
    )?;

    let disease_y = column(&train, DISEASED)?;
    let mut svm_rng = rng::stream(cfg.seed, Stream::Training);
    let svm = fit_linear_svm(&x, &disease_y, names.clone(), &cfg.svm, &mut svm_rng)?;
    let svm_train_objective = svm.objective_on(&x, &disease_y);

    let feed_y = column(&train, FEED)?;
    let gbm = fit_gbm(&x, &feed_y, names.clone(), &cfg.gbm)?;

    let mlp_names: Vec<String> = IMITATION_FEATURES.iter().map(|s| s.to_string()).collect();
    let mut mx = design(&train, &mlp_names)?;
    let mut my = equipment_labels(&train)?;
    if cfg.imitation_grid {
        let (gx, gy) = imitation_training_grid(control);
        mx.extend(gx);
        my.extend(gy);
    }
    let mut mlp_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x4d4c50));
    let mlp_fit = fit_mlp_imitation(&mx, &my, mlp_names, &cfg.mlp, &mut mlp_rng)?;
    let grid_agreement = grid_agreement(&mlp_fit.model, control)?;

    let mut bundle = ModelBundle {
        format_version: FORMAT_VERSION,
        forest: Some(forest),
        svm: Some(svm),
        gbm: Some(gbm),
        mlp: Some(mlp_fit.model),
        metadata: None,
    };
    let test = evaluate(&bundle, ds, SplitTag::Test)?;
    let hash = dataset_hash(ds)?;
    let gbm_stage_mse = bundle.gbm.as_ref().map(|g| g.train_mse.clone()).unwrap_or_default();
    let report = TrainReport {
        mse: BTreeMap::from([
            ("forest_test".to_string(), test.forest_test_mse),
            ("forest_baseline".to_string(), test.forest_baseline_mse),
            ("forest_ph_test".to_string(), test.forest_ph_test_mse),
            ("gbm_test".to_string(), test.gbm_test_mse),
            ("gbm_baseline".to_string(), test.gbm_baseline_mse),
        ]),
        accuracy: BTreeMap::from([
            ("svm_test".to_string(), test.svm_accuracy),
            ("svm_recall".to_string(), test.svm_recall),
            ("svm_false_positive_rate".to_string(), test.svm_false_positive_rate),
        ]),
        agreement: BTreeMap::from([
            ("mlp_test".to_string(), test.mlp_agreement),
            ("mlp_grid".to_string(), grid_agreement),
        ]),
        gbm_stage_mse: gbm_stage_mse.clone(),
        seed: cfg.seed,
        dataset_hash: hash.clone(),
    };
    bundle.metadata = Some(TrainingMetadata {
        seed: cfg.seed,
        dataset_hash: hash,
        n_train: train.len(),
        gbm_stage_mse,
        mlp_loss_history: mlp_fit.loss_history,
        mlp_grid_agreement: grid_agreement,
        svm_train_objective,
        test,
    });
    Ok((bundle, report))
}

/// Share of held-out grid cells where every thresholded output equals the rule label.
pub fn grid_agreement(model: &MlpModel, control: &ControlConfig) -> Result<f64> {
    let (x, y) = imitation_heldout_grid(control);
    agreement(model, &x, &y)
}

pub fn agreement(model: &MlpModel, x: &Matrix, y: &Matrix) -> Result<f64> {
    let mut hits = 0usize;
    for (row, labels) in x.iter().zip(y) {
        let p = mlp_forward(model, row)?;
        if p.iter().zip(labels).all(|(p, l)| action(*p) == (*l > 0.5)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / x.len().max(1) as f64)
}

impl ModelBundle {
    pub fn is_trained(&self) -> bool {
        self.forest.is_some() && self.svm.is_some() && self.gbm.is_some() && self.mlp.is_some()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: ModelBundle = serde_json::from_str(s)?;
        if b.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported bundle format_version {}", b.format_version)));
        }
        Ok(b)
    }

    fn parts(&self) -> Result<(&ForestModel, &SvmModel, &GbmModel, &MlpModel)> {
        match (&self.forest, &self.svm, &self.gbm, &self.mlp) {
            (Some(f), Some(s), Some(g), Some(m)) => Ok((f, s, g, m)),
            _ => Err(Error::Untrained),
        }
    }
}

/// Runs all four predictors on one frame.
pub fn ml_propose(bundle: &ModelBundle, frame: &FeatureFrame) -> Result<MlProposal> {
    let (forest, svm, gbm, mlp) = bundle.parts()?;
    Ok(MlProposal {
        setpoints: predict_setpoints(forest, frame)?,
        health: predict_health(svm, frame)?,
        feed_g_per_tick: predict_feed(gbm, frame)?,
        equipment: mlp_frame(mlp, frame)?,
    })
}

/// Metrics of every model on one split. Baselines predict the train-split mean
/// when the dataset has one, else the evaluated split's mean.
pub fn evaluate(bundle: &ModelBundle, ds: &Dataset, split: SplitTag) -> Result<EvalMetrics> {
    let (forest, svm, gbm, mlp) = bundle.parts()?;
    let part = ds.subset(split);
    if part.is_empty() {
        return Err(Error::invalid("dataset", format!("{split:?} split is empty")));
    }
    let reference = if ds.count(SplitTag::Train) > 0 { ds.subset(SplitTag::Train) } else { part.clone() };

    let fx = design(&part, &forest.feature_names)?;
    let mut forest_mse = [0.0; 2];
    let mut forest_base = [0.0; 2];
    for (k, target) in [TEMP_SETPOINT, PH_SETPOINT].into_iter().enumerate() {
        let y = column(&part, target)?;
        let pred: Vec<f64> = fx.iter().map(|r| forest.predict_target(target, r)).collect::<Result<_>>()?;
        forest_mse[k] = mse(&pred, &y);
        let m = mean(&column(&reference, target)?);
        forest_base[k] = mse(&vec![m; y.len()], &y);
    }

    let sx = design(&part, &svm.feature_names)?;
    let sy = column(&part, DISEASED)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (row, y) in sx.iter().zip(&sy) {
        match (svm.classify_row(row).label == 1, *y > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { f64::NAN } else { a as f64 / (a + b) as f64 };

    let gx = design(&part, &gbm.feature_names)?;
    let gy = column(&part, FEED)?;
    let gpred: Vec<f64> = gx.iter().map(|r| gbm.predict_row(r)).collect();
    let gm = mean(&column(&reference, FEED)?);

    let mx = design(&part, &mlp.feature_names)?;
    let my = equipment_labels(&part)?;

    Ok(EvalMetrics {
        split: Some(split),
        n_frames: part.len(),
        forest_test_mse: forest_mse[0],
        forest_baseline_mse: forest_base[0],
        forest_ph_test_mse: forest_mse[1],
        forest_ph_baseline_mse: forest_base[1],
        svm_accuracy: (tp + tn) as f64 / part.len() as f64,
        svm_recall: ratio(tp, fneg),
        svm_false_positive_rate: ratio(fp, tn),
        gbm_test_mse: mse(&gpred, &gy),
        gbm_baseline_mse: mse(&vec![gm; gy.len()], &gy),
        mlp_agreement: agreement(mlp, &mx, &my)?,
    })
}
