//! Discrete-time tank plant and its imperfect sensors.
//!
//! The plant integrates explicit first-order Euler updates once per tick.
//! Rates are expressed per minute and scaled by `dt_s / 60`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::{Channel, PerChannel};
use crate::error::{ensure_finite, ensure_prob, Error, Result};
use crate::rng::{self, Stream};

/// pH the tank chemistry reverts to.
pub const PH_EQUILIBRIUM: f64 = 7.2;
/// Reversion of pH toward equilibrium, per minute.
pub const PH_REVERSION_PER_MIN: f64 = 0.05;
/// Behavior level of a healthy population.
pub const HEALTHY_BEHAVIOR: f64 = 0.8;
/// Behavior level a diseased population decays toward.
pub const DISEASED_BEHAVIOR: f64 = 0.3;
/// Per-tick relaxation of the latent health index toward its target.
pub const BEHAVIOR_RATE_PER_TICK: f64 = 0.05;
/// Tick-to-tick scatter of the observed behavior score around the health index.
pub const BEHAVIOR_NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmState {
    pub time_s: f64,
    /// Percent of tank capacity.
    pub water_level: f64,
    pub water_temp_c: f64,
    pub air_humidity_pct: f64,
    pub ph: f64,
    pub behavior_score: f64,
    /// Latent mean of `behavior_score`; drifts toward the healthy or diseased level.
    pub health_index: f64,
    pub diseased: bool,
    pub fish_count: u32,
}

impl Default for FarmState {
    fn default() -> Self {
        FarmState {
            time_s: 0.0,
            water_level: 60.0,
            water_temp_c: 24.0,
            air_humidity_pct: 55.0,
            ph: PH_EQUILIBRIUM,
            behavior_score: HEALTHY_BEHAVIOR,
            health_index: HEALTHY_BEHAVIOR,
            diseased: false,
            fish_count: 500,
        }
    }
}

impl FarmState {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("time_s", self.time_s),
            ("water_level", self.water_level),
            ("water_temp_c", self.water_temp_c),
            ("air_humidity_pct", self.air_humidity_pct),
            ("ph", self.ph),
            ("behavior_score", self.behavior_score),
            ("health_index", self.health_index),
        ] {
            ensure_finite(field, v)?;
        }
        check_range("water_level", self.water_level, 0.0, 100.0)?;
        check_range("air_humidity_pct", self.air_humidity_pct, 0.0, 100.0)?;
        check_range("ph", self.ph, 0.0, 14.0)?;
        check_range("behavior_score", self.behavior_score, 0.0, 1.0)?;
        check_range("health_index", self.health_index, 0.0, 1.0)?;
        if self.time_s < 0.0 {
            return Err(Error::invalid("time_s", "negative"));
        }
        Ok(())
    }

    /// Ground-truth value of a sensed channel.
    pub fn channel(&self, ch: Channel) -> f64 {
        match ch {
            Channel::Level => self.water_level,
            Channel::Temp => self.water_temp_c,
            Channel::Humidity => self.air_humidity_pct,
            Channel::Ph => self.ph,
            Channel::Behavior => self.behavior_score,
        }
    }
}

fn check_range(field: &'static str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{v} outside [{lo}, {hi}]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    pub dt_s: f64,
    pub ambient_temp_c: f64,
    pub ambient_humidity_pct: f64,
    pub drain_rate_pct_per_min: f64,
    pub fill_rate_pct_per_min: f64,
    pub k_temp_per_min: f64,
    pub heater_c_per_min: f64,
    pub cooler_c_per_min: f64,
    pub k_hum_per_min: f64,
    pub humidifier_pct_per_min: f64,
    pub dehumidifier_pct_per_min: f64,
    pub ph_drift_per_min: f64,
    pub disease_onset_prob_per_tick: f64,
    pub seed: u64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            dt_s: 60.0,
            ambient_temp_c: 22.0,
            ambient_humidity_pct: 60.0,
            drain_rate_pct_per_min: 1.0,
            fill_rate_pct_per_min: 5.0,
            k_temp_per_min: 0.02,
            heater_c_per_min: 0.5,
            cooler_c_per_min: 0.5,
            k_hum_per_min: 0.02,
            humidifier_pct_per_min: 2.0,
            dehumidifier_pct_per_min: 2.0,
            ph_drift_per_min: 0.01,
            disease_onset_prob_per_tick: 0.001,
            seed: 42,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("dt_s", self.dt_s)?;
        if self.dt_s <= 0.0 {
            return Err(Error::invalid("dt_s", "must be positive"));
        }
        ensure_finite("ambient_temp_c", self.ambient_temp_c)?;
        ensure_finite("ambient_humidity_pct", self.ambient_humidity_pct)?;
        for (field, v) in [
            ("drain_rate_pct_per_min", self.drain_rate_pct_per_min),
            ("fill_rate_pct_per_min", self.fill_rate_pct_per_min),
            ("k_temp_per_min", self.k_temp_per_min),
            ("heater_c_per_min", self.heater_c_per_min),
            ("cooler_c_per_min", self.cooler_c_per_min),
            ("k_hum_per_min", self.k_hum_per_min),
            ("humidifier_pct_per_min", self.humidifier_pct_per_min),
            ("dehumidifier_pct_per_min", self.dehumidifier_pct_per_min),
            ("ph_drift_per_min", self.ph_drift_per_min),
        ] {
            ensure_finite(field, v)?;
            if v < 0.0 {
                return Err(Error::invalid(field, "rates must be non-negative"));
            }
        }
        ensure_prob("disease_onset_prob_per_tick", self.disease_onset_prob_per_tick)
    }

    pub fn dt_min(&self) -> f64 {
        self.dt_s / 60.0
    }
}

/// The five switchable devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Motor,
    Heater,
    Cooler,
    Humidifier,
    Dehumidifier,
}

impl Device {
    pub const ALL: [Device; 5] =
        [Device::Motor, Device::Heater, Device::Cooler, Device::Humidifier, Device::Dehumidifier];

    pub fn name(self) -> &'static str {
        match self {
            Device::Motor => "motor",
            Device::Heater => "heater",
            Device::Cooler => "cooler",
            Device::Humidifier => "humidifier",
            Device::Dehumidifier => "dehumidifier",
        }
    }

    /// The sensed channel the device's control depends on.
    pub fn channel(self) -> Channel {
        match self {
            Device::Motor => Channel::Level,
            Device::Heater | Device::Cooler => Channel::Temp,
            Device::Humidifier | Device::Dehumidifier => Channel::Humidity,
        }
    }
}

impl std::str::FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Device::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::invalid("device", format!("unknown device {s:?}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState {
    pub motor_on: bool,
    pub heater_on: bool,
    pub cooler_on: bool,
    pub humidifier_on: bool,
    pub dehumidifier_on: bool,
    pub feed_g_per_tick: f64,
}

impl ActuatorState {
    pub fn get(&self, d: Device) -> bool {
        match d {
            Device::Motor => self.motor_on,
            Device::Heater => self.heater_on,
            Device::Cooler => self.cooler_on,
            Device::Humidifier => self.humidifier_on,
            Device::Dehumidifier => self.dehumidifier_on,
        }
    }

    pub fn set(&mut self, d: Device, on: bool) {
        match d {
            Device::Motor => self.motor_on = on,
            Device::Heater => self.heater_on = on,
            Device::Cooler => self.cooler_on = on,
            Device::Humidifier => self.humidifier_on = on,
            Device::Dehumidifier => self.dehumidifier_on = on,
        }
    }
}

fn on(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Generators consumed by [`step_plant`].
#[derive(Debug, Clone)]
pub struct PlantRng {
    pub plant: ChaCha8Rng,
    pub disease: ChaCha8Rng,
}

impl PlantRng {
    pub fn new(seed: u64) -> Self {
        PlantRng { plant: rng::stream(seed, Stream::Plant), disease: rng::stream(seed, Stream::Disease) }
    }
}

/// A plant and its sensors, advanced one tick at a time with the streams of `params.seed`.
#[derive(Debug, Clone)]
pub struct LivePlant {
    pub state: FarmState,
    pub params: PlantParams,
    pub sensors: SensorConfig,
    rng: PlantRng,
    sensor_rng: ChaCha8Rng,
}

impl LivePlant {
    pub fn new(initial: FarmState, params: PlantParams, sensors: SensorConfig) -> Result<Self> {
        initial.validate()?;
        params.validate()?;
        sensors.validate()?;
        let rng = PlantRng::new(params.seed);
        let sensor_rng = rng::stream(params.seed, Stream::Sensors);
        Ok(LivePlant { state: initial, params, sensors, rng, sensor_rng })
    }

    pub fn read(&mut self) -> Vec<SensorReading> {
        read_sensors(&self.state, &self.sensors, &mut self.sensor_rng)
    }

    pub fn advance(&mut self, act: &ActuatorState) -> Result<()> {
        self.state = step_plant(&self.state, act, &self.params, &mut self.rng)?;
        Ok(())
    }
}

/// Advances the plant by one tick.
pub fn step_plant(
    state: &FarmState,
    act: &ActuatorState,
    params: &PlantParams,
    rng: &mut PlantRng,
) -> Result<FarmState> {
    state.validate()?;
    params.validate()?;
    ensure_finite("feed_g_per_tick", act.feed_g_per_tick)?;
    let dt = params.dt_min();

    let level = state.water_level
        + (params.fill_rate_pct_per_min * on(act.motor_on) - params.drain_rate_pct_per_min) * dt;

    let temp = state.water_temp_c
        + (params.k_temp_per_min * (params.ambient_temp_c - state.water_temp_c)
            + params.heater_c_per_min * on(act.heater_on)
            - params.cooler_c_per_min * on(act.cooler_on))
            * dt;

    let humidity = state.air_humidity_pct
        + (params.k_hum_per_min * (params.ambient_humidity_pct - state.air_humidity_pct)
            + params.humidifier_pct_per_min * on(act.humidifier_on)
            - params.dehumidifier_pct_per_min * on(act.dehumidifier_on))
            * dt;

    let ph_step = Normal::new(0.0, params.ph_drift_per_min * dt.sqrt())
        .map_err(|e| Error::invalid("ph_drift_per_min", e.to_string()))?;
    let ph = state.ph + PH_REVERSION_PER_MIN * (PH_EQUILIBRIUM - state.ph) * dt + ph_step.sample(&mut rng.plant);

    // One draw per tick keeps the disease stream aligned regardless of state.
    let onset = rng.disease.random::<f64>() < params.disease_onset_prob_per_tick;
    let diseased = state.diseased || onset;
    let target = if diseased { DISEASED_BEHAVIOR } else { HEALTHY_BEHAVIOR };
    let health_index = state.health_index + BEHAVIOR_RATE_PER_TICK * (target - state.health_index);
    let scatter = Normal::new(0.0, BEHAVIOR_NOISE_SIGMA).expect("constant sigma");
    let behavior = health_index + scatter.sample(&mut rng.plant);

    let next = FarmState {
        time_s: state.time_s + params.dt_s,
        water_level: level.clamp(0.0, 100.0),
        water_temp_c: temp,
        air_humidity_pct: humidity.clamp(0.0, 100.0),
        ph: ph.clamp(0.0, 14.0),
        behavior_score: behavior.clamp(0.0, 1.0),
        health_index: health_index.clamp(0.0, 1.0),
        diseased,
        fish_count: state.fish_count,
    };
    ensure_finite("water_temp_c", next.water_temp_c)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Ok,
    Missing,
    Suspect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub sensor_id: String,
    pub channel: Channel,
    pub timestamp_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub quality: Quality,
}

impl SensorReading {
    pub fn ok(channel: Channel, timestamp_s: f64, value: f64) -> Self {
        SensorReading {
            sensor_id: format!("{}-0", channel.name()),
            channel,
            timestamp_s,
            value: Some(value),
            quality: Quality::Ok,
        }
    }

    pub fn missing(channel: Channel, timestamp_s: f64) -> Self {
        SensorReading {
            sensor_id: format!("{}-0", channel.name()),
            channel,
            timestamp_s,
            value: None,
            quality: Quality::Missing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.quality == Quality::Missing) != self.value.is_none() {
            return Err(Error::invalid("quality", "missing quality must coincide with absent value"));
        }
        if !(self.timestamp_s >= 0.0) {
            return Err(Error::invalid("timestamp_s", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub noise_sigma: PerChannel<f64>,
    pub dropout_prob: f64,
    pub spike_prob: f64,
    pub spike_magnitude: PerChannel<f64>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            noise_sigma: PerChannel { level: 0.5, temp: 0.05, humidity: 0.3, ph: 0.02, behavior: 0.02 },
            dropout_prob: 0.01,
            spike_prob: 0.005,
            spike_magnitude: PerChannel { level: 15.0, temp: 3.0, humidity: 10.0, ph: 1.0, behavior: 0.3 },
        }
    }
}

impl SensorConfig {
    /// Perfect sensors: no noise, dropouts or spikes.
    pub fn ideal() -> Self {
        SensorConfig {
            noise_sigma: PerChannel::default(),
            dropout_prob: 0.0,
            spike_prob: 0.0,
            spike_magnitude: PerChannel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_prob("dropout_prob", self.dropout_prob)?;
        ensure_prob("spike_prob", self.spike_prob)?;
        for (_, &s) in self.noise_sigma.iter() {
            ensure_finite("noise_sigma", s)?;
            if s < 0.0 {
                return Err(Error::invalid("noise_sigma", "must be non-negative"));
            }
        }
        for (_, &m) in self.spike_magnitude.iter() {
            ensure_finite("spike_magnitude", m)?;
        }
        Ok(())
    }
}

/// Samples one reading per channel from the true state.
pub fn read_sensors(state: &FarmState, cfg: &SensorConfig, rng: &mut ChaCha8Rng) -> Vec<SensorReading> {
    Channel::ALL
        .into_iter()
        .map(|ch| {
            // Fixed draw count per channel keeps sequences aligned across configs.
            let dropout = rng.random::<f64>() < cfg.dropout_prob;
            let spike = rng.random::<f64>() < cfg.spike_prob;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            if dropout {
                return SensorReading::missing(ch, state.time_s);
            }
            let truth = state.channel(ch);
            let value = if spike {
                truth + sign * cfg.spike_magnitude.get(ch)
            } else {
                truth + z * cfg.noise_sigma.get(ch)
            };
            SensorReading::ok(ch, state.time_s, value)
        })
        .collect()
}
