//! Closed-loop episodes: read → decide → actuate → step, logged per tick.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::config::RunConfig;
use crate::control::{ControlConfig, ControlDecision};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::ml::arbitrate::MlMode;
use crate::ml::bundle::ModelBundle;
use crate::ml::labels::targets_for;
use crate::pipeline::{Controller, FarmController};
use crate::preprocess::{clean_frames, split, synchronize, CleanOptions, Dataset};
use crate::rng::{self, Stream};
use crate::sim::{FarmState, LivePlant, PlantParams, SensorConfig, SensorReading};

/// One tick of an episode log. `state` is the plant state the readings were taken from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub t: f64,
    pub state: FarmState,
    pub readings: Vec<SensorReading>,
    pub decision: ControlDecision,
}

#[derive(Debug)]
pub struct EpisodeOutcome {
    pub records: Vec<EpisodeRecord>,
    pub final_state: FarmState,
    /// Set when the controller or plant failed; `records` holds the ticks completed before.
    pub error: Option<Error>,
}

impl EpisodeOutcome {
    pub fn into_result(self) -> Result<Vec<EpisodeRecord>> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.records),
        }
    }
}

/// Runs `n_ticks` iterations with the plant and sensor streams of `params.seed`.
pub fn run_episode(
    initial: &FarmState,
    params: &PlantParams,
    sensors: &SensorConfig,
    controller: &mut dyn Controller,
    n_ticks: u64,
) -> Result<EpisodeOutcome> {
    if n_ticks == 0 {
        return Err(Error::invalid("n_ticks", "must be at least 1"));
    }
    let mut plant = LivePlant::new(initial.clone(), params.clone(), sensors.clone())?;
    let mut records = Vec::with_capacity(n_ticks as usize);
    for k in 0..n_ticks {
        let readings = plant.read();
        let decision = match controller.decide(k, plant.state.time_s, &readings) {
            Ok(d) => d,
            Err(e) => {
                let error = Error::Controller { tick: k, reason: e.to_string() };
                return Ok(EpisodeOutcome { records, final_state: plant.state, error: Some(error) });
            }
        };
        let state = plant.state.clone();
        if let Err(e) = plant.advance(&decision.commands) {
            return Ok(EpisodeOutcome { records, final_state: state, error: Some(e) });
        }
        records.push(EpisodeRecord { t: state.time_s, state, readings, decision });
    }
    let state = plant.state;
    Ok(EpisodeOutcome { records, final_state: state, error: None })
}

/// Random start: temperature 15–35 °C, level 0–100 %, humidity 20–90 %RH.
pub fn random_initial_state(seed: u64, index: u64) -> FarmState {
    let mut r = rng::indexed(seed, Stream::Initial, index);
    FarmState {
        water_temp_c: r.random_range(15.0..=35.0),
        water_level: r.random_range(0.0..=100.0),
        air_humidity_pct: r.random_range(20.0..=90.0),
        ..FarmState::default()
    }
}

/// Seed of the `index`-th episode of a run.
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    run_seed.wrapping_mul(0x100_0000_01B3).wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One episode in a batch.
#[derive(Debug, Clone)]
pub struct EpisodeSpec {
    pub initial: FarmState,
    pub params: PlantParams,
    pub sensors: SensorConfig,
    pub n_ticks: u64,
}

/// Runs independent episodes, each with a controller built by `make_controller(index)`.
pub fn run_batch<C, F>(specs: &[EpisodeSpec], make_controller: F, mode: ExecMode) -> Vec<Result<Vec<EpisodeRecord>>>
where
    C: Controller,
    F: Fn(usize) -> C + Sync + Send,
{
    exec::map_indices(mode, specs.len(), |i| {
        let s = &specs[i];
        let mut c = make_controller(i);
        run_episode(&s.initial, &s.params, &s.sensors, &mut c, s.n_ticks).and_then(EpisodeOutcome::into_result)
    })
}

/// Episode specs of a run. Episode `i` uses plant seed `episode_seed(cfg.seed, i)`;
/// `cfg.plant.seed` is not consulted.
pub fn run_specs(cfg: &RunConfig) -> Vec<EpisodeSpec> {
    (0..cfg.episode.episodes)
        .map(|i| EpisodeSpec {
            initial: if cfg.episode.randomize_initial {
                random_initial_state(cfg.seed, i)
            } else {
                cfg.episode.initial.clone()
            },
            params: PlantParams { seed: episode_seed(cfg.seed, i), ..cfg.plant.clone() },
            sensors: cfg.sensors.clone(),
            n_ticks: cfg.episode.ticks,
        })
        .collect()
}

/// Runs every episode of `cfg` under the full controller.
pub fn simulate_run(
    cfg: &RunConfig,
    bundle: Option<Arc<ModelBundle>>,
    ml_mode: MlMode,
    exec: ExecMode,
) -> Result<Vec<Vec<EpisodeRecord>>> {
    cfg.validate()?;
    let specs = run_specs(cfg);
    let clean = cfg.clean_options();
    run_batch(
        &specs,
        |_| {
            let c = FarmController::new(cfg.control.clone(), clean.clone());
            match &bundle {
                Some(b) => c.with_models(b.clone(), ml_mode),
                None => c,
            }
        },
        exec,
    )
    .into_iter()
    .collect()
}

/// Concatenates per-episode datasets in order and applies the chronological split.
pub fn dataset_from_run(episodes: &[Vec<EpisodeRecord>], cfg: &RunConfig) -> Result<Dataset> {
    let clean = cfg.clean_options();
    let mut ds: Option<Dataset> = None;
    for records in episodes.iter().filter(|r| !r.is_empty()) {
        let part = dataset_from_episode(records, cfg.plant.dt_s, &clean, &cfg.control)?;
        match ds.as_mut() {
            Some(d) => d.append(part),
            None => ds = Some(part),
        }
    }
    split(&ds.ok_or(Error::EmptyData)?, cfg.dataset.ratios)
}

pub fn write_jsonl<W: Write>(records: &[EpisodeRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Error for a line that does not parse.
#[derive(Debug, thiserror::Error)]
#[error("line {line}: {reason}")]
pub struct CorruptLine {
    pub line: usize,
    pub reason: String,
}

pub fn read_jsonl<R: BufRead>(r: R) -> std::result::Result<Vec<EpisodeRecord>, CorruptLine> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| CorruptLine { line: i + 1, reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorruptLine { line: i + 1, reason: e.to_string() })?);
    }
    Ok(out)
}

/// Batch-cleans an episode's readings and attaches targets from the logged ground truth.
pub fn dataset_from_episode(
    records: &[EpisodeRecord],
    grid_dt_s: f64,
    clean: &CleanOptions,
    control: &ControlConfig,
) -> Result<Dataset> {
    let readings: Vec<SensorReading> = records.iter().flat_map(|r| r.readings.iter().cloned()).collect();
    let raw = synchronize(&readings, grid_dt_s)?;
    let frames = clean_frames(&raw, clean)?;
    let first_tick = records.first().map_or(0, |r| (r.t / grid_dt_s).floor() as u64);
    let targets = frames
        .iter()
        .map(|f| {
            let idx = (f.tick_index - first_tick) as usize;
            let state = &records[idx.min(records.len() - 1)].state;
            targets_for(f, state, control)
        })
        .collect();
    Dataset::new(frames, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{null_controller, FarmController};

    #[test]
    fn single_tick_log() {
        let out = run_episode(&FarmState::default(), &PlantParams::default(), &SensorConfig::default(), &mut null_controller, 1)
            .unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.error.is_none());
        assert!(run_episode(&FarmState::default(), &PlantParams::default(), &SensorConfig::default(), &mut null_controller, 0)
            .is_err());
    }

    #[test]
    fn null_controller_drains_to_zero() {
        let p = PlantParams::default();
        let start = FarmState { water_level: 10.0, ..Default::default() };
        let out = run_episode(&start, &p, &SensorConfig::ideal(), &mut null_controller, 15).unwrap();
        let levels: Vec<f64> = out.records.iter().map(|r| r.state.water_level).collect();
        for (k, l) in levels.iter().enumerate() {
            let expected = (10.0 - p.drain_rate_pct_per_min * p.dt_min() * k as f64).max(0.0);
            assert!((l - expected).abs() < 1e-9, "tick {k}: {l} vs {expected}");
        }
        assert_eq!(out.final_state.water_level, 0.0);
    }

    #[test]
    fn controller_failure_keeps_partial_log() {
        let mut fails_at_3 = |k: u64, _: f64, _: &[SensorReading]| -> Result<ControlDecision> {
            if k == 3 {
                Err(Error::invalid("test", "boom"))
            } else {
                Ok(ControlDecision::default())
            }
        };
        let out = run_episode(&FarmState::default(), &PlantParams::default(), &SensorConfig::default(), &mut fails_at_3, 10)
            .unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(matches!(out.error, Some(Error::Controller { tick: 3, .. })));
    }

    #[test]
    fn log_round_trips_and_is_deterministic() {
        let run = || {
            let mut c = FarmController::new(ControlConfig::default(), CleanOptions::default());
            let out = run_episode(&FarmState::default(), &PlantParams::default(), &SensorConfig::default(), &mut c, 40).unwrap();
            let mut buf = Vec::new();
            write_jsonl(&out.records, &mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        let back = read_jsonl(&a[..]).unwrap();
        assert_eq!(back.len(), 40);
        let mut again = Vec::new();
        write_jsonl(&back, &mut again).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn corrupt_line_reports_number() {
        let err = read_jsonl(&b"\n{\"t\":0}\n"[..]).unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn dataset_from_logged_episode() {
        let mut c = FarmController::new(ControlConfig::default(), CleanOptions::default());
        let out = run_episode(&FarmState::default(), &PlantParams::default(), &SensorConfig::default(), &mut c, 30).unwrap();
        let ds = dataset_from_episode(&out.records, 60.0, &CleanOptions::default(), &ControlConfig::default()).unwrap();
        assert_eq!(ds.len(), 30);
        assert!(ds.targets.iter().all(|t| t.contains_key("feed_g_per_tick") && t.contains_key("cmd_heater")));
    }
}
