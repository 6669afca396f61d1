//! Threshold controller for water level, temperature and humidity, and the
//! safety envelope that vets every tick's commands.
//!
//! Decision precedence within one tick is rule < ml < manual < safety.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::channel::{Channel, PerChannel};
use crate::error::{ensure_finite, Error, Result};
use crate::ml::arbitrate::{arbitrate, MlMode, MlProposal};
use crate::preprocess::FeatureFrame;
use crate::sim::{ActuatorState, Device};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyEnvelope {
    pub hard_temp_min: f64,
    pub hard_temp_max: f64,
    pub low_level_alarm: f64,
    pub sensor_stale_ticks: u32,
}

impl Default for SafetyEnvelope {
    fn default() -> Self {
        SafetyEnvelope { hard_temp_min: 20.0, hard_temp_max: 32.0, low_level_alarm: 20.0, sensor_stale_ticks: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub desired_water_level: f64,
    pub lower_temperature_threshold: f64,
    pub upper_temperature_threshold: f64,
    pub lower_humidity_threshold: f64,
    pub upper_humidity_threshold: f64,
    /// Percent of capacity per minute.
    pub motor_fill_rate: f64,
    pub tick_interval_s: f64,
    /// Feed issued by the rule controller every tick.
    pub rule_feed_g_per_tick: f64,
    /// Upper clamp for ML feed proposals.
    pub max_feed_g_per_tick: f64,
    pub safety: SafetyEnvelope,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            desired_water_level: 100.0,
            lower_temperature_threshold: 25.0,
            upper_temperature_threshold: 28.0,
            lower_humidity_threshold: 40.0,
            upper_humidity_threshold: 70.0,
            motor_fill_rate: 5.0,
            tick_interval_s: 60.0,
            rule_feed_g_per_tick: 10.0,
            max_feed_g_per_tick: 20.0,
            safety: SafetyEnvelope::default(),
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("desired_water_level", self.desired_water_level),
            ("lower_temperature_threshold", self.lower_temperature_threshold),
            ("upper_temperature_threshold", self.upper_temperature_threshold),
            ("lower_humidity_threshold", self.lower_humidity_threshold),
            ("upper_humidity_threshold", self.upper_humidity_threshold),
            ("motor_fill_rate", self.motor_fill_rate),
            ("tick_interval_s", self.tick_interval_s),
            ("rule_feed_g_per_tick", self.rule_feed_g_per_tick),
            ("max_feed_g_per_tick", self.max_feed_g_per_tick),
            ("hard_temp_min", self.safety.hard_temp_min),
            ("hard_temp_max", self.safety.hard_temp_max),
            ("low_level_alarm", self.safety.low_level_alarm),
        ] {
            ensure_finite(field, v)?;
        }
        if !(0.0..=100.0).contains(&self.desired_water_level) {
            return Err(Error::invalid("desired_water_level", "must be within [0, 100]"));
        }
        if self.lower_temperature_threshold >= self.upper_temperature_threshold {
            return Err(Error::invalid("lower_temperature_threshold", "must be below the upper threshold"));
        }
        if self.lower_humidity_threshold >= self.upper_humidity_threshold {
            return Err(Error::invalid("lower_humidity_threshold", "must be below the upper threshold"));
        }
        if self.motor_fill_rate <= 0.0 {
            return Err(Error::invalid("motor_fill_rate", "must be positive"));
        }
        if self.tick_interval_s <= 0.0 {
            return Err(Error::invalid("tick_interval_s", "must be positive"));
        }
        if self.rule_feed_g_per_tick < 0.0 || self.max_feed_g_per_tick < 0.0 {
            return Err(Error::invalid("feed", "must be non-negative"));
        }
        let s = &self.safety;
        if !(s.hard_temp_min < self.lower_temperature_threshold && s.hard_temp_max > self.upper_temperature_threshold) {
            return Err(Error::invalid("safety", "hard temperature bounds must strictly contain the control band"));
        }
        if s.sensor_stale_ticks == 0 {
            return Err(Error::invalid("sensor_stale_ticks", "must be at least 1"));
        }
        Ok(())
    }
}

/// Which layer set a command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Rule,
    Ml,
    Manual,
    Safety,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandSources {
    pub motor: Source,
    pub heater: Source,
    pub cooler: Source,
    pub humidifier: Source,
    pub dehumidifier: Source,
    pub feed: Source,
}

impl CommandSources {
    pub fn get(&self, d: Device) -> Source {
        match d {
            Device::Motor => self.motor,
            Device::Heater => self.heater,
            Device::Cooler => self.cooler,
            Device::Humidifier => self.humidifier,
            Device::Dehumidifier => self.dehumidifier,
        }
    }

    pub fn set(&mut self, d: Device, s: Source) {
        match d {
            Device::Motor => self.motor = s,
            Device::Heater => self.heater = s,
            Device::Cooler => self.cooler = s,
            Device::Humidifier => self.humidifier = s,
            Device::Dehumidifier => self.dehumidifier = s,
        }
    }

    pub fn any(&self, s: Source) -> bool {
        Device::ALL.iter().any(|&d| self.get(d) == s) || self.feed == s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertCode {
    LowWater,
    CriticalTemp,
    SensorFault,
    DiseaseSuspected,
    HumidityRange,
    /// Mutually exclusive devices were both requested.
    ActuatorConflict,
    /// The event log could not be written.
    StorageFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub code: AlertCode,
    pub severity: Severity,
    pub timestamp_s: f64,
    pub message: String,
    #[serde(default)]
    pub acknowledged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<Device>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<Channel>,
}

impl Alert {
    pub fn new(code: AlertCode, severity: Severity, timestamp_s: f64, message: impl Into<String>) -> Self {
        Alert { code, severity, timestamp_s, message: message.into(), acknowledged: false, device: None, channel: None }
    }

    pub fn with_device(mut self, d: Device) -> Self {
        self.device = Some(d);
        self
    }

    pub fn with_channel(mut self, c: Channel) -> Self {
        self.channel = Some(c);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub commands: ActuatorState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill_time_min: Option<f64>,
    pub alerts: Vec<Alert>,
    pub sources: CommandSources,
    /// Temperature band the heater/cooler branch used this tick.
    pub temp_band: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ml: Option<MlProposal>,
}

/// Consecutive ticks without a fresh reading, per channel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorHealth {
    pub stale_ticks: PerChannel<u32>,
}

/// Manual commands in force for this tick.
pub type ActiveOverrides = BTreeMap<Device, bool>;

/// Motor command and the informational fill time in minutes.
pub fn water_level_control(level: f64, cfg: &ControlConfig) -> (bool, Option<f64>) {
    if level < cfg.desired_water_level {
        let required = cfg.desired_water_level - level;
        (true, Some(required / cfg.motor_fill_rate))
    } else {
        (false, None)
    }
}

/// (heater, cooler). Values equal to a threshold take the off branch.
pub fn temperature_control(temp: f64, lower: f64, upper: f64) -> (bool, bool) {
    if temp < lower {
        (true, false)
    } else if temp > upper {
        (false, true)
    } else {
        (false, false)
    }
}

/// (humidifier, dehumidifier). Values equal to a threshold take the off branch.
pub fn humidity_control(humidity: f64, cfg: &ControlConfig) -> (bool, bool) {
    if humidity < cfg.lower_humidity_threshold {
        (true, false)
    } else if humidity > cfg.upper_humidity_threshold {
        (false, true)
    } else {
        (false, false)
    }
}

/// The three threshold branches composed, all sources `rule`.
pub fn rule_decision(frame: &FeatureFrame, cfg: &ControlConfig) -> ControlDecision {
    let (motor, fill_time) = water_level_control(frame.value(Channel::Level), cfg);
    let band = (cfg.lower_temperature_threshold, cfg.upper_temperature_threshold);
    let (heater, cooler) = temperature_control(frame.value(Channel::Temp), band.0, band.1);
    let (humidifier, dehumidifier) = humidity_control(frame.value(Channel::Humidity), cfg);
    ControlDecision {
        commands: ActuatorState {
            motor_on: motor,
            heater_on: heater,
            cooler_on: cooler,
            humidifier_on: humidifier,
            dehumidifier_on: dehumidifier,
            feed_g_per_tick: cfg.rule_feed_g_per_tick,
        },
        fill_time_min: fill_time,
        alerts: Vec::new(),
        sources: CommandSources::default(),
        temp_band: band,
        ml: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyOutcome {
    pub commands: ActuatorState,
    pub alerts: Vec<Alert>,
    /// Devices whose command the envelope decided.
    pub vetoed: Vec<Device>,
}

/// Applies the hard envelope. Never fails: anything unsafe is switched off and alarmed.
pub fn safety_check(
    frame: &FeatureFrame,
    proposed: &ActuatorState,
    env: &SafetyEnvelope,
    health: &SensorHealth,
) -> SafetyOutcome {
    let t = frame.timestamp_s;
    let mut cmd = proposed.clone();
    let mut alerts = Vec::new();
    let mut vetoed = Vec::new();
    let veto = |cmd: &mut ActuatorState, d: Device, vetoed: &mut Vec<Device>| {
        cmd.set(d, false);
        if !vetoed.contains(&d) {
            vetoed.push(d);
        }
    };

    let temp = frame.value(Channel::Temp);
    if !(temp >= env.hard_temp_min && temp <= env.hard_temp_max) {
        veto(&mut cmd, Device::Heater, &mut vetoed);
        veto(&mut cmd, Device::Cooler, &mut vetoed);
        alerts.push(Alert::new(
            AlertCode::CriticalTemp,
            Severity::Critical,
            t,
            format!(
                "water temperature {temp:.2} °C outside [{}, {}]; heater and cooler shut down",
                env.hard_temp_min, env.hard_temp_max
            ),
        ));
    }

    let level = frame.value(Channel::Level);
    if level < env.low_level_alarm {
        alerts.push(Alert::new(
            AlertCode::LowWater,
            Severity::Warning,
            t,
            format!("water level {level:.1}% below alarm level {}%", env.low_level_alarm),
        ));
    }

    for ch in Channel::ALL {
        let stale = *health.stale_ticks.get(ch);
        if stale >= env.sensor_stale_ticks {
            let dependents: Vec<Device> = Device::ALL.into_iter().filter(|d| d.channel() == ch).collect();
            for &d in &dependents {
                veto(&mut cmd, d, &mut vetoed);
            }
            alerts.push(
                Alert::new(
                    AlertCode::SensorFault,
                    Severity::Critical,
                    t,
                    format!("{ch} sensor stale for {stale} ticks"),
                )
                .with_channel(ch),
            );
        }
    }

    for (a, b) in [(Device::Heater, Device::Cooler), (Device::Humidifier, Device::Dehumidifier)] {
        if cmd.get(a) && cmd.get(b) {
            veto(&mut cmd, a, &mut vetoed);
            veto(&mut cmd, b, &mut vetoed);
            alerts.push(
                Alert::new(
                    AlertCode::ActuatorConflict,
                    Severity::Warning,
                    t,
                    format!("{} and {} both requested; both switched off", a.name(), b.name()),
                )
                .with_device(a),
            );
        }
    }

    if !cmd.feed_g_per_tick.is_finite() || cmd.feed_g_per_tick < 0.0 {
        cmd.feed_g_per_tick = 0.0;
    }

    SafetyOutcome { commands: cmd, alerts, vetoed }
}

/// Optional ML input to a tick.
#[derive(Debug, Clone, Copy)]
pub struct MlInput<'a> {
    pub proposal: &'a MlProposal,
    pub mode: MlMode,
}

/// One control decision: rules, then ML arbitration, then manual overrides, then safety.
pub fn tick(
    frame: &FeatureFrame,
    cfg: &ControlConfig,
    overrides: &ActiveOverrides,
    ml: Option<MlInput<'_>>,
    health: &SensorHealth,
) -> Result<ControlDecision> {
    frame.ensure_complete()?;
    let mut decision = rule_decision(frame, cfg);

    if let Some(ml) = ml {
        decision = arbitrate(&decision, ml.proposal, frame, cfg, ml.mode);
    }

    for (&device, &on) in overrides {
        decision.commands.set(device, on);
        decision.sources.set(device, Source::Manual);
    }

    let humidity = frame.value(Channel::Humidity);
    if humidity < cfg.lower_humidity_threshold || humidity > cfg.upper_humidity_threshold {
        decision.alerts.push(Alert::new(
            AlertCode::HumidityRange,
            Severity::Info,
            frame.timestamp_s,
            format!(
                "air humidity {humidity:.1}% outside [{}, {}]",
                cfg.lower_humidity_threshold, cfg.upper_humidity_threshold
            ),
        ));
    }

    let vetted = safety_check(frame, &decision.commands, &cfg.safety, health);
    decision.commands = vetted.commands;
    for d in vetted.vetoed {
        decision.sources.set(d, Source::Safety);
    }
    decision.alerts.extend(vetted.alerts);
    if !decision.commands.motor_on {
        decision.fill_time_min = None;
    }
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(level: f64, temp: f64, hum: f64) -> FeatureFrame {
        FeatureFrame::from_values(0, 0.0, PerChannel { level, temp, humidity: hum, ph: 7.2, behavior: 0.8 })
    }

    #[test]
    fn level_branch() {
        let cfg = ControlConfig::default();
        assert_eq!(water_level_control(80.0, &cfg), (true, Some(4.0)));
        assert_eq!(water_level_control(100.0, &cfg), (false, None));
        assert_eq!(water_level_control(0.0, &cfg), (true, Some(20.0)));
    }

    #[test]
    fn temperature_branch() {
        assert_eq!(temperature_control(24.0, 25.0, 28.0), (true, false));
        assert_eq!(temperature_control(26.5, 25.0, 28.0), (false, false));
        assert_eq!(temperature_control(29.0, 25.0, 28.0), (false, true));
        assert_eq!(temperature_control(25.0, 25.0, 28.0), (false, false));
        assert_eq!(temperature_control(28.0, 25.0, 28.0), (false, false));
    }

    #[test]
    fn humidity_branch() {
        let cfg = ControlConfig::default();
        assert_eq!(humidity_control(35.0, &cfg), (true, false));
        assert_eq!(humidity_control(55.0, &cfg), (false, false));
        assert_eq!(humidity_control(75.0, &cfg), (false, true));
        assert_eq!(humidity_control(40.0, &cfg), (false, false));
        assert_eq!(humidity_control(70.0, &cfg), (false, false));
    }

    #[test]
    fn composed_tick() {
        let d = tick(&frame(80.0, 24.0, 55.0), &ControlConfig::default(), &ActiveOverrides::new(), None, &SensorHealth::default())
            .unwrap();
        assert!(d.commands.motor_on && d.commands.heater_on);
        assert!(!d.commands.cooler_on && !d.commands.humidifier_on && !d.commands.dehumidifier_on);
        assert_eq!(d.fill_time_min, Some(4.0));
        assert!(d.alerts.is_empty());
        assert_eq!(d.sources, CommandSources::default());
    }

    #[test]
    fn manual_override_sets_source() {
        let mut ov = ActiveOverrides::new();
        ov.insert(Device::Heater, false);
        let d = tick(&frame(100.0, 24.0, 55.0), &ControlConfig::default(), &ov, None, &SensorHealth::default()).unwrap();
        assert!(!d.commands.heater_on);
        assert_eq!(d.sources.heater, Source::Manual);
    }

    #[test]
    fn safety_outranks_manual() {
        let mut ov = ActiveOverrides::new();
        ov.insert(Device::Heater, true);
        let d = tick(&frame(100.0, 35.0, 55.0), &ControlConfig::default(), &ov, None, &SensorHealth::default()).unwrap();
        assert!(!d.commands.heater_on && !d.commands.cooler_on);
        assert_eq!(d.sources.heater, Source::Safety);
        let a = d.alerts.iter().find(|a| a.code == AlertCode::CriticalTemp).unwrap();
        assert_eq!(a.severity, Severity::Critical);
    }

    #[test]
    fn safety_identity_on_nominal() {
        let proposed = ActuatorState { motor_on: true, heater_on: true, feed_g_per_tick: 3.0, ..Default::default() };
        let out = safety_check(&frame(50.0, 26.0, 55.0), &proposed, &SafetyEnvelope::default(), &SensorHealth::default());
        assert_eq!(out.commands, proposed);
        assert!(out.alerts.is_empty() && out.vetoed.is_empty());
    }

    #[test]
    fn stale_level_stops_motor() {
        let mut health = SensorHealth::default();
        health.stale_ticks.level = 3;
        let proposed = ActuatorState { motor_on: true, ..Default::default() };
        let out = safety_check(&frame(50.0, 26.0, 55.0), &proposed, &SafetyEnvelope::default(), &health);
        assert!(!out.commands.motor_on);
        assert!(out.alerts.iter().any(|a| a.code == AlertCode::SensorFault && a.severity == Severity::Critical));
        health.stale_ticks.level = 2;
        let out = safety_check(&frame(50.0, 26.0, 55.0), &proposed, &SafetyEnvelope::default(), &health);
        assert!(out.commands.motor_on);
    }

    #[test]
    fn low_water_warns_but_fills() {
        let proposed = ActuatorState { motor_on: true, ..Default::default() };
        let out = safety_check(&frame(10.0, 26.0, 55.0), &proposed, &SafetyEnvelope::default(), &SensorHealth::default());
        assert!(out.commands.motor_on);
        assert_eq!(out.alerts[0].code, AlertCode::LowWater);
        assert_eq!(out.alerts[0].severity, Severity::Warning);
    }

    #[test]
    fn conflicting_devices_both_off() {
        let proposed = ActuatorState { heater_on: true, cooler_on: true, humidifier_on: true, dehumidifier_on: true, ..Default::default() };
        let out = safety_check(&frame(100.0, 26.0, 55.0), &proposed, &SafetyEnvelope::default(), &SensorHealth::default());
        assert_eq!(out.commands, ActuatorState::default());
        assert_eq!(out.alerts.len(), 2);
    }

    #[test]
    fn missing_channel_rejected() {
        let mut f = frame(50.0, 26.0, 55.0);
        f.values.ph = f64::NAN;
        assert!(matches!(
            tick(&f, &ControlConfig::default(), &ActiveOverrides::new(), None, &SensorHealth::default()),
            Err(Error::MissingChannel(Channel::Ph))
        ));
    }

    #[test]
    fn config_validation() {
        ControlConfig::default().validate().unwrap();
        let bad = ControlConfig { lower_temperature_threshold: 29.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ControlConfig { safety: SafetyEnvelope { hard_temp_max: 28.0, ..Default::default() }, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ControlConfig { motor_fill_rate: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
