//! The run configuration document shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::ControlConfig;
use crate::error::{Error, Result};
use crate::ml::arbitrate::MlMode;
use crate::ml::bundle::MlConfig;
use crate::preprocess::CleanOptions;
use crate::sim::{FarmState, PlantParams, SensorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub ticks: u64,
    pub episodes: u64,
    /// Draw each episode's start state at random instead of using `initial`.
    pub randomize_initial: bool,
    pub initial: FarmState,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { ticks: 720, episodes: 1, randomize_initial: false, initial: FarmState::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub ratios: (f64, f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { ratios: (0.7, 0.15, 0.15) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_dir: String,
    /// Wall-clock time between control ticks; simulated time still advances by `dt_s`.
    pub tick_period_ms: u64,
    pub mode: MlMode,
    /// fsync every appended event before acknowledging it.
    pub fsync: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { port: 8080, data_dir: "data".into(), tick_period_ms: 1000, mode: MlMode::RuleOnly, fsync: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub plant: PlantParams,
    pub sensors: SensorConfig,
    /// Defaults are derived from the sensor noise when absent.
    pub preprocess: Option<CleanOptions>,
    pub dataset: DatasetConfig,
    pub control: ControlConfig,
    pub ml: MlConfig,
    pub service: ServiceConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.sensors.validate()?;
        self.control.validate()?;
        self.episode.initial.validate()?;
        if self.episode.ticks == 0 {
            return Err(Error::invalid("episode.ticks", "must be at least 1"));
        }
        if self.episode.episodes == 0 {
            return Err(Error::invalid("episode.episodes", "must be at least 1"));
        }
        if let Some(p) = &self.preprocess {
            if p.outlier_window < 3 || !(p.outlier_k > 0.0) || p.feature_windows.is_empty() {
                return Err(Error::invalid("preprocess", "window >= 3, k > 0 and nonempty feature windows required"));
            }
        }
        Ok(())
    }

    pub fn clean_options(&self) -> CleanOptions {
        self.preprocess.clone().unwrap_or_else(|| CleanOptions::for_sensors(&self.sensors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"plant": {"dt": 60}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invariants_checked() {
        let bad = r#"{"control": {"lower_temperature_threshold": 29}}"#;
        assert!(RunConfig::from_json(bad).is_err());
        let ok = r#"{"seed": 3, "control": {"desired_water_level": 90}, "service": {"mode": "ml_assist"}}"#;
        let cfg = RunConfig::from_json(ok).unwrap();
        assert_eq!(cfg.control.desired_water_level, 90.0);
        assert_eq!(cfg.service.mode, MlMode::MlAssist);
    }
}
