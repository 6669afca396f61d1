//! Causal, tick-by-tick preprocessing and the controller that drives the plant.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::channel::{Channel, PerChannel};
use crate::control::{tick, ActiveOverrides, ControlConfig, ControlDecision, MlInput, SensorHealth};
use crate::error::Result;
use crate::ml::arbitrate::MlMode;
use crate::ml::bundle::{ml_propose, ModelBundle};
use crate::preprocess::{features_at, is_outlier, CleanOptions, FeatureFrame, RepairFlags};
use crate::sim::{Quality, SensorReading, HEALTHY_BEHAVIOR, PH_EQUILIBRIUM};

/// Values assumed for a channel that has never reported. Chosen so the rule
/// controller takes no action on them.
pub fn neutral_prior(cfg: &ControlConfig) -> PerChannel<f64> {
    PerChannel {
        level: cfg.desired_water_level,
        temp: 0.5 * (cfg.lower_temperature_threshold + cfg.upper_temperature_threshold),
        humidity: 0.5 * (cfg.lower_humidity_threshold + cfg.upper_humidity_threshold),
        ph: PH_EQUILIBRIUM,
        behavior: HEALTHY_BEHAVIOR,
    }
}

/// Online counterpart of the batch cleaning pipeline: gaps and outliers carry
/// the last clean value forward, outliers are judged against a trailing window
/// of raw readings, features use trailing windows only.
#[derive(Debug, Clone)]
pub struct OnlinePreprocessor {
    opts: CleanOptions,
    prior: PerChannel<f64>,
    history: PerChannel<VecDeque<f64>>,
    /// Unrepaired values, the reference for the outlier test.
    raw: PerChannel<VecDeque<f64>>,
    stale: PerChannel<u32>,
    capacity: usize,
}

impl OnlinePreprocessor {
    pub fn new(opts: CleanOptions, prior: PerChannel<f64>) -> Self {
        let capacity = opts.feature_windows.iter().copied().max().unwrap_or(1).max(opts.outlier_window).max(2);
        OnlinePreprocessor {
            opts,
            prior,
            history: PerChannel::default(),
            raw: PerChannel::default(),
            stale: PerChannel::default(),
            capacity,
        }
    }

    pub fn health(&self) -> SensorHealth {
        SensorHealth { stale_ticks: self.stale }
    }

    /// Ingests one tick of readings and returns the cleaned frame.
    pub fn push(&mut self, readings: &[SensorReading], tick_index: u64, timestamp_s: f64) -> FeatureFrame {
        let mut values = PerChannel::from_fn(|_| f64::NAN);
        let mut flags = PerChannel::<RepairFlags>::default();
        let mut engineered = std::collections::BTreeMap::new();
        let window = self.opts.outlier_window.max(3);

        for ch in Channel::ALL {
            let fresh = readings
                .iter()
                .filter(|r| r.channel == ch && r.quality == Quality::Ok)
                .filter_map(|r| r.value.filter(|v| v.is_finite()).map(|v| (r.timestamp_s, v)))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, v)| v);
            let history = self.history.get_mut(ch);
            let flag = flags.get_mut(ch);
            let value = match fresh {
                Some(v) => {
                    *self.stale.get_mut(ch) = 0;
                    let raw = self.raw.get_mut(ch);
                    raw.push_back(v);
                    if raw.len() > window {
                        raw.pop_front();
                    }
                    let mut value = v;
                    // A shift that fills half the trailing window becomes the median and is accepted.
                    if raw.len() >= window {
                        let w: Vec<f64> = raw.iter().copied().collect();
                        let (flagged, med) = is_outlier(v, &w, self.opts.outlier_k, *self.opts.abs_floor.get(ch));
                        if flagged {
                            // The trailing median lags by half a window; the last clean value by one tick.
                            value = history.back().copied().unwrap_or(med);
                            flag.was_outlier = true;
                        }
                    }
                    value
                }
                None => {
                    *self.stale.get_mut(ch) += 1;
                    flag.was_missing = true;
                    history.back().copied().unwrap_or(*self.prior.get(ch))
                }
            };
            history.push_back(value);
            if history.len() > self.capacity {
                history.pop_front();
            }
            *values.get_mut(ch) = value;
            let series: Vec<f64> = history.iter().copied().collect();
            features_at(ch, &series, &self.opts.feature_windows, &mut engineered);
        }
        FeatureFrame { tick_index, timestamp_s, values, flags, engineered }
    }
}

/// Anything that maps one tick of readings to a decision.
pub trait Controller {
    fn decide(&mut self, tick_index: u64, time_s: f64, readings: &[SensorReading]) -> Result<ControlDecision>;
}

impl<F> Controller for F
where
    F: FnMut(u64, f64, &[SensorReading]) -> Result<ControlDecision>,
{
    fn decide(&mut self, tick_index: u64, time_s: f64, readings: &[SensorReading]) -> Result<ControlDecision> {
        self(tick_index, time_s, readings)
    }
}

/// Controller that keeps every actuator off.
pub fn null_controller(_: u64, _: f64, _: &[SensorReading]) -> Result<ControlDecision> {
    Ok(ControlDecision::default())
}

/// Preprocessing, rules, optional ML, overrides and safety, per tick.
#[derive(Debug, Clone)]
pub struct FarmController {
    pre: OnlinePreprocessor,
    pub config: ControlConfig,
    pub bundle: Option<Arc<ModelBundle>>,
    pub mode: MlMode,
    pub overrides: ActiveOverrides,
    last_frame: Option<FeatureFrame>,
}

impl FarmController {
    pub fn new(config: ControlConfig, opts: CleanOptions) -> Self {
        let prior = neutral_prior(&config);
        FarmController {
            pre: OnlinePreprocessor::new(opts, prior),
            config,
            bundle: None,
            mode: MlMode::RuleOnly,
            overrides: ActiveOverrides::new(),
            last_frame: None,
        }
    }

    pub fn with_models(mut self, bundle: Arc<ModelBundle>, mode: MlMode) -> Self {
        self.bundle = Some(bundle);
        self.mode = mode;
        self
    }

    pub fn last_frame(&self) -> Option<&FeatureFrame> {
        self.last_frame.as_ref()
    }

    pub fn health(&self) -> SensorHealth {
        self.pre.health()
    }

    /// Cleans the readings into a frame without deciding.
    pub fn ingest(&mut self, tick_index: u64, time_s: f64, readings: &[SensorReading]) -> FeatureFrame {
        let frame = self.pre.push(readings, tick_index, time_s);
        self.last_frame = Some(frame.clone());
        frame
    }

    /// Decision for an already-ingested frame.
    pub fn decide_frame(&self, frame: &FeatureFrame) -> Result<ControlDecision> {
        let proposal = match &self.bundle {
            Some(b) => Some(ml_propose(b, frame)?),
            None => None,
        };
        let ml = proposal.as_ref().map(|p| MlInput { proposal: p, mode: self.mode });
        tick(frame, &self.config, &self.overrides, ml, &self.pre.health())
    }
}

impl Controller for FarmController {
    fn decide(&mut self, tick_index: u64, time_s: f64, readings: &[SensorReading]) -> Result<ControlDecision> {
        let frame = self.ingest(tick_index, time_s, readings);
        self.decide_frame(&frame)
    }
}
