//! Merging model proposals into the rule decision.

use serde::{Deserialize, Serialize};

use super::forest::Setpoints;
use super::svm::HealthPrediction;
use crate::control::{temperature_control, Alert, AlertCode, ControlConfig, ControlDecision, Severity, Source};
use crate::channel::Channel;
use crate::ml::mlp::action;
use crate::preprocess::FeatureFrame;
use crate::sim::Device;

/// Minimum |p − 0.5| for an equipment probability to replace the rule command.
pub const CONFIDENCE: f64 = 0.4;
/// Margin kept between an ML temperature setpoint and the configured thresholds,
/// and the half-width of the band built around that setpoint.
pub const SETPOINT_MARGIN_C: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlMode {
    #[default]
    RuleOnly,
    MlAssist,
}

impl std::str::FromStr for MlMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rule_only" => Ok(MlMode::RuleOnly),
            "ml_assist" => Ok(MlMode::MlAssist),
            other => Err(format!("unknown mode {other:?} (expected rule_only or ml_assist)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlProposal {
    pub setpoints: Setpoints,
    pub health: HealthPrediction,
    pub feed_g_per_tick: f64,
    /// Probabilities in device order: motor, heater, cooler, humidifier, dehumidifier.
    pub equipment: Vec<f64>,
}

/// Clamps a temperature setpoint into the configured band minus the margin.
pub fn clamp_setpoint(s: f64, cfg: &ControlConfig) -> f64 {
    let lo = cfg.lower_temperature_threshold + SETPOINT_MARGIN_C;
    let hi = cfg.upper_temperature_threshold - SETPOINT_MARGIN_C;
    if lo > hi {
        0.5 * (cfg.lower_temperature_threshold + cfg.upper_temperature_threshold)
    } else {
        s.clamp(lo, hi)
    }
}

pub fn arbitrate(
    rule: &ControlDecision,
    prop: &MlProposal,
    frame: &FeatureFrame,
    cfg: &ControlConfig,
    mode: MlMode,
) -> ControlDecision {
    let mut out = rule.clone();
    out.ml = Some(prop.clone());
    if prop.health.label == 1 {
        out.alerts.push(Alert::new(
            AlertCode::DiseaseSuspected,
            Severity::Warning,
            frame.timestamp_s,
            format!("fish behavior classified as affected (margin {:.3})", prop.health.score),
        ));
    }
    if mode == MlMode::RuleOnly {
        return out;
    }

    if prop.feed_g_per_tick.is_finite() {
        out.commands.feed_g_per_tick = prop.feed_g_per_tick.clamp(0.0, cfg.max_feed_g_per_tick);
        out.sources.feed = Source::Ml;
    }

    let setpoint = prop.setpoints.temp_setpoint_c.is_finite().then(|| clamp_setpoint(prop.setpoints.temp_setpoint_c, cfg));
    for (d, p) in Device::ALL.into_iter().zip(&prop.equipment) {
        // With a setpoint available, heater and cooler follow its band instead.
        let thermal = matches!(d, Device::Heater | Device::Cooler);
        if (setpoint.is_none() || !thermal) && p.is_finite() && (p - 0.5).abs() >= CONFIDENCE {
            out.commands.set(d, action(*p));
            out.sources.set(d, Source::Ml);
        }
    }

    if let Some(s) = setpoint {
        let band = (s - SETPOINT_MARGIN_C, s + SETPOINT_MARGIN_C);
        let (heater, cooler) = temperature_control(frame.value(Channel::Temp), band.0, band.1);
        for (d, on) in [(Device::Heater, heater), (Device::Cooler, cooler)] {
            if out.commands.get(d) != on {
                out.commands.set(d, on);
                out.sources.set(d, Source::Ml);
            }
        }
        out.temp_band = band;
    }
    out
}
