//! Training targets for the closed simulated world.
//!
//! Setpoint and feed targets are known synthetic functions of frame features,
//! the disease label is simulator ground truth, and equipment labels are the
//! rule controller's own commands.

use std::collections::BTreeMap;

use super::forest::{PH_SETPOINT, TEMP_SETPOINT};
use super::gbm::FEED;
use super::mlp::equipment_target;
use super::svm::DISEASED;
use super::Matrix;
use crate::channel::{Channel, PerChannel};
use crate::control::{rule_decision, ControlConfig};
use crate::preprocess::FeatureFrame;
use crate::sim::{Device, FarmState};

/// Grams per fish per tick at the metabolic optimum.
pub const FEED_BASE_G_PER_FISH: f64 = 0.02;
pub const FEED_OPTIMUM_C: f64 = 26.5;
pub const FEED_WIDTH_C: f64 = 2.0;

/// Ideal water temperature given air humidity and fish behavior.
pub fn ideal_temp_setpoint(humidity: f64, behavior: f64) -> f64 {
    let stress = (HEALTHY_BEHAVIOR_REF - behavior).clamp(0.0, 0.5);
    26.5 + 0.8 * ((humidity - 55.0) / 10.0).tanh() - 2.0 * stress
}

const HEALTHY_BEHAVIOR_REF: f64 = 0.8;

/// Ideal pH given water temperature.
pub fn ideal_ph_setpoint(temp: f64) -> f64 {
    7.0 + 0.3 * ((temp - 26.5) / 2.0).tanh()
}

/// Metabolic feeding curve: base · exp(−((T − 26.5)/2)²) · fish_count.
pub fn ideal_feed(temp: f64, fish_count: u32) -> f64 {
    FEED_BASE_G_PER_FISH * (-((temp - FEED_OPTIMUM_C) / FEED_WIDTH_C).powi(2)).exp() * fish_count as f64
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Every target of one frame; `state` is the ground truth at the frame's tick.
pub fn targets_for(frame: &FeatureFrame, state: &FarmState, cfg: &ControlConfig) -> BTreeMap<String, f64> {
    let mut t = BTreeMap::new();
    t.insert(
        TEMP_SETPOINT.to_string(),
        ideal_temp_setpoint(frame.value(Channel::Humidity), frame.value(Channel::Behavior)),
    );
    t.insert(PH_SETPOINT.to_string(), ideal_ph_setpoint(frame.value(Channel::Temp)));
    t.insert(FEED.to_string(), ideal_feed(frame.value(Channel::Temp), state.fish_count));
    t.insert(DISEASED.to_string(), if state.diseased { 1.0 } else { -1.0 });
    for (d, v) in rule_labels(frame, cfg).into_iter().enumerate() {
        t.insert(equipment_target(Device::ALL[d]), v);
    }
    t
}

/// Rule-controller commands as 0/1 labels in device order.
pub fn rule_labels(frame: &FeatureFrame, cfg: &ControlConfig) -> Vec<f64> {
    let c = rule_decision(frame, cfg).commands;
    Device::ALL.iter().map(|&d| bit(c.get(d))).collect()
}

/// `lo, lo + step, …` up to `hi` inclusive, without accumulated rounding.
pub fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Rule-labeled grid over (level, temp, humidity) in the imitation feature order.
pub fn rule_grid(levels: &[f64], temps: &[f64], hums: &[f64], cfg: &ControlConfig) -> (Matrix, Matrix) {
    let mut x = Vec::with_capacity(levels.len() * temps.len() * hums.len());
    let mut y = Vec::with_capacity(x.capacity());
    for &level in levels {
        for &temp in temps {
            for &humidity in hums {
                let f = FeatureFrame::from_values(
                    0,
                    0.0,
                    PerChannel { level, temp, humidity, ph: 7.2, behavior: 0.8 },
                );
                x.push(vec![level, temp, humidity]);
                y.push(rule_labels(&f, cfg));
            }
        }
    }
    (x, y)
}

/// Grid the imitation network is trained on. Level 50 never appears in it.
pub fn imitation_training_grid(cfg: &ControlConfig) -> (Matrix, Matrix) {
    rule_grid(
        &[0.0, 20.0, 40.0, 60.0, 80.0, 95.0, 99.0, 99.5, 100.0],
        &steps(19.5, 33.5, 0.25),
        &steps(29.5, 80.5, 0.5),
        cfg,
    )
}

/// Threshold-spanning evaluation grid: temp 20–33 by 0.25, humidity 30–80 by 1, level {50, 100}.
pub fn imitation_heldout_grid(cfg: &ControlConfig) -> (Matrix, Matrix) {
    rule_grid(&[50.0, 100.0], &steps(20.0, 33.0, 0.25), &steps(30.0, 80.0, 1.0), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_steps_are_exact() {
        let s = steps(20.0, 33.0, 0.25);
        assert_eq!(s.len(), 53);
        assert_eq!(s[20], 25.0);
        assert_eq!(*s.last().unwrap(), 33.0);
        assert_eq!(steps(30.0, 80.0, 1.0).len(), 51);
    }

    #[test]
    fn feed_peaks_at_optimum() {
        assert!((ideal_feed(26.5, 500) - 10.0).abs() < 1e-12);
        assert!(ideal_feed(22.0, 500) < ideal_feed(25.0, 500));
    }

    #[test]
    fn heldout_grid_labels_follow_rules() {
        let (x, y) = imitation_heldout_grid(&ControlConfig::default());
        assert_eq!(x.len(), 2 * 53 * 51);
        let i = x.iter().position(|r| r == &vec![50.0, 24.75, 39.0]).unwrap();
        assert_eq!(y[i], vec![1.0, 1.0, 0.0, 1.0, 0.0]);
        let i = x.iter().position(|r| r == &vec![100.0, 25.0, 70.0]).unwrap();
        assert_eq!(y[i], vec![0.0; 5]);
    }
}
