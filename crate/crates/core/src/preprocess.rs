//! Sensor cleaning: grid synchronization, gap imputation, robust outlier
//! repair, rolling feature engineering and chronological dataset splitting.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::channel::{Channel, PerChannel};
use crate::error::{Error, Result};
use crate::sim::{Quality, SensorConfig, SensorReading};

/// Scale factor turning a MAD into a Gaussian sigma estimate.
pub const MAD_TO_SIGMA: f64 = 1.4826;
pub const DEFAULT_OUTLIER_WINDOW: usize = 11;
pub const DEFAULT_OUTLIER_K: f64 = 4.5;
/// Default engineered-feature windows, in ticks.
pub const DEFAULT_FEATURE_WINDOWS: [usize; 2] = [10, 60];

/// Sensor values of one grid bucket before repair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFrame {
    pub tick_index: u64,
    pub timestamp_s: f64,
    pub values: PerChannel<Option<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairFlags {
    pub was_missing: bool,
    pub was_outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub tick_index: u64,
    pub timestamp_s: f64,
    pub values: PerChannel<f64>,
    pub flags: PerChannel<RepairFlags>,
    #[serde(default)]
    pub engineered: BTreeMap<String, f64>,
}

impl FeatureFrame {
    /// A frame with only channel values; used by tests and by the rule-table grids.
    pub fn from_values(tick_index: u64, timestamp_s: f64, values: PerChannel<f64>) -> Self {
        FeatureFrame {
            tick_index,
            timestamp_s,
            values,
            flags: PerChannel::default(),
            engineered: BTreeMap::new(),
        }
    }

    pub fn value(&self, ch: Channel) -> f64 {
        *self.values.get(ch)
    }

    /// Looks up a raw channel (by channel name) or an engineered feature.
    pub fn feature(&self, name: &str) -> Option<f64> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .map(|c| self.value(c))
            .or_else(|| self.engineered.get(name).copied())
    }

    /// Every feature name the frame carries: channels first, then engineered in key order.
    pub fn feature_names(&self) -> Vec<String> {
        Channel::ALL
            .iter()
            .map(|c| c.name().to_string())
            .chain(self.engineered.keys().cloned())
            .collect()
    }

    /// Errors when any channel value is not finite.
    pub fn ensure_complete(&self) -> Result<()> {
        for (ch, v) in self.values.iter() {
            if !v.is_finite() {
                return Err(Error::MissingChannel(ch));
            }
        }
        Ok(())
    }
}

/// Buckets readings onto a regular grid; the latest present reading per channel wins.
pub fn synchronize(readings: &[SensorReading], grid_dt_s: f64) -> Result<Vec<RawFrame>> {
    if !(grid_dt_s > 0.0) || !grid_dt_s.is_finite() {
        return Err(Error::invalid("grid_dt_s", "must be positive"));
    }
    for r in readings {
        if !(r.timestamp_s >= 0.0) || !r.timestamp_s.is_finite() {
            return Err(Error::invalid("timestamp_s", format!("{} is not a valid timestamp", r.timestamp_s)));
        }
    }
    let Some(last) = readings.iter().map(|r| bucket(r.timestamp_s, grid_dt_s)).max() else {
        return Ok(Vec::new());
    };
    let first = readings.iter().map(|r| bucket(r.timestamp_s, grid_dt_s)).min().unwrap_or(0);

    let mut frames: Vec<RawFrame> = (first..=last)
        .map(|b| RawFrame {
            tick_index: b,
            timestamp_s: b as f64 * grid_dt_s,
            values: PerChannel::default(),
        })
        .collect();
    let mut latest: Vec<PerChannel<f64>> = vec![PerChannel::from_fn(|_| f64::NEG_INFINITY); frames.len()];

    for r in readings {
        let (Some(v), Quality::Ok) = (r.value, r.quality) else { continue };
        let idx = (bucket(r.timestamp_s, grid_dt_s) - first) as usize;
        let seen = latest[idx].get_mut(r.channel);
        if r.timestamp_s >= *seen {
            *seen = r.timestamp_s;
            *frames[idx].values.get_mut(r.channel) = Some(v);
        }
    }
    Ok(frames)
}

fn bucket(t: f64, dt: f64) -> u64 {
    (t / dt).floor() as u64
}

/// Fills gaps: linear interpolation inside, back-fill at the head, carry-forward at the tail.
///
/// Returns the completed series and a flag per position marking imputed values.
pub fn impute(series: &[Option<f64>]) -> Result<(Vec<f64>, Vec<bool>)> {
    let present: Vec<usize> = series.iter().enumerate().filter(|(_, v)| v.is_some()).map(|(i, _)| i).collect();
    let (Some(&first), Some(&last)) = (present.first(), present.last()) else {
        return Err(Error::invalid("series", "no present value to impute from"));
    };
    let mut out = Vec::with_capacity(series.len());
    let mut flags = Vec::with_capacity(series.len());
    let mut next_present = 0usize;
    for (i, v) in series.iter().enumerate() {
        if let Some(x) = v {
            out.push(*x);
            flags.push(false);
            next_present += 1;
            continue;
        }
        let filled = if i < first {
            series[first].unwrap()
        } else if i > last {
            series[last].unwrap()
        } else {
            let lo = present[next_present - 1];
            let hi = present[next_present];
            let (y0, y1) = (series[lo].unwrap(), series[hi].unwrap());
            y0 + (y1 - y0) * (i - lo) as f64 / (hi - lo) as f64
        };
        out.push(filled);
        flags.push(true);
    }
    Ok((out, flags))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median and median absolute deviation of a window.
pub fn median_mad(window: &[f64]) -> (f64, f64) {
    let med = median(window);
    let dev: Vec<f64> = window.iter().map(|x| (x - med).abs()).collect();
    (med, median(&dev))
}

/// Robust deviation test for a single point against its window.
pub fn is_outlier(x: f64, window: &[f64], k: f64, abs_floor: f64) -> (bool, f64) {
    let (med, mad) = median_mad(window);
    let dev = (x - med).abs();
    let flagged = if mad > 0.0 { dev > k * MAD_TO_SIGMA * mad } else { dev > abs_floor };
    (flagged, med)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierRepair {
    pub cleaned: Vec<f64>,
    pub flags: Vec<bool>,
}

/// Rolling median/MAD outlier detection over a centered window (shifted inward at
/// the series ends so it always spans `window` points). Flagged points are
/// replaced by their window median.
pub fn detect_outliers(series: &[f64], window: usize, k: f64, abs_floor: f64) -> Result<OutlierRepair> {
    if window < 3 {
        return Err(Error::invalid("window", "must be at least 3"));
    }
    if !(k > 0.0) {
        return Err(Error::invalid("k", "must be positive"));
    }
    if window > series.len() {
        return Err(Error::WindowTooLarge { window, len: series.len() });
    }
    let n = series.len();
    let half = window / 2;
    let mut cleaned = series.to_vec();
    let mut flags = vec![false; n];
    for i in 0..n {
        let start = i.saturating_sub(half).min(n - window);
        let (flag, med) = is_outlier(series[i], &series[start..start + window], k, abs_floor);
        if flag {
            cleaned[i] = med;
            flags[i] = true;
        }
    }
    Ok(OutlierRepair { cleaned, flags })
}

/// Fallback threshold used when a window's MAD is zero: three noise sigmas, at least 0.5.
pub fn abs_floor(sigma: f64) -> f64 {
    (3.0 * sigma).max(0.5)
}

/// Least-squares slope of equally spaced points, per step.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let xm = (n - 1) as f64 / 2.0;
    let ym = ys.iter().sum::<f64>() / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        num += dx * (y - ym);
        den += dx * dx;
    }
    num / den
}

/// Engineered features of the last element of `history` (which ends at the current frame).
pub fn features_at(ch: Channel, history: &[f64], windows: &[usize], out: &mut BTreeMap<String, f64>) {
    let n = history.len();
    if n == 0 {
        return;
    }
    let delta = if n >= 2 { history[n - 1] - history[n - 2] } else { 0.0 };
    out.insert(format!("{}_delta", ch.name()), delta);
    for &w in windows {
        let tail = &history[n.saturating_sub(w.max(1))..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        out.insert(format!("{}_mean_{w}", ch.name()), mean);
        out.insert(format!("{}_slope_{w}", ch.name()), ls_slope(tail));
    }
}

/// Adds rolling means, first differences and trend slopes to every frame.
pub fn engineer_features(frames: &mut [FeatureFrame], windows: &[usize]) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::invalid("windows", "must be nonempty"));
    }
    for ch in Channel::ALL {
        let series: Vec<f64> = frames.iter().map(|f| f.value(ch)).collect();
        for (i, frame) in frames.iter_mut().enumerate() {
            features_at(ch, &series[..=i], windows, &mut frame.engineered);
        }
    }
    Ok(())
}

/// Options for turning raw frames into feature frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanOptions {
    pub outlier_window: usize,
    pub outlier_k: f64,
    pub abs_floor: PerChannel<f64>,
    pub feature_windows: Vec<usize>,
}

impl Default for CleanOptions {
    fn default() -> Self {
        CleanOptions::for_sensors(&SensorConfig::default())
    }
}

impl CleanOptions {
    pub fn for_sensors(sensors: &SensorConfig) -> Self {
        CleanOptions {
            outlier_window: DEFAULT_OUTLIER_WINDOW,
            outlier_k: DEFAULT_OUTLIER_K,
            abs_floor: sensors.noise_sigma.map(|_, &s| abs_floor(s)),
            feature_windows: DEFAULT_FEATURE_WINDOWS.to_vec(),
        }
    }
}

/// Imputes, repairs outliers and engineers features for a synchronized segment.
pub fn clean_frames(raw: &[RawFrame], opts: &CleanOptions) -> Result<Vec<FeatureFrame>> {
    let mut frames: Vec<FeatureFrame> = raw
        .iter()
        .map(|r| FeatureFrame {
            tick_index: r.tick_index,
            timestamp_s: r.timestamp_s,
            values: PerChannel::from_fn(|_| f64::NAN),
            flags: PerChannel::default(),
            engineered: BTreeMap::new(),
        })
        .collect();
    for ch in Channel::ALL {
        let series: Vec<Option<f64>> = raw.iter().map(|r| *r.values.get(ch)).collect();
        let (filled, missing) = impute(&series).map_err(|_| Error::AllMissing(ch))?;
        let repaired = if filled.len() >= opts.outlier_window.max(3) {
            detect_outliers(&filled, opts.outlier_window, opts.outlier_k, *opts.abs_floor.get(ch))?
        } else {
            OutlierRepair { flags: vec![false; filled.len()], cleaned: filled }
        };
        for (i, frame) in frames.iter_mut().enumerate() {
            *frame.values.get_mut(ch) = repaired.cleaned[i];
            let flags = frame.flags.get_mut(ch);
            flags.was_missing = missing[i];
            flags.was_outlier = repaired.flags[i] && !missing[i];
        }
    }
    engineer_features(&mut frames, &opts.feature_windows)?;
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Frames with per-frame targets and split tags, in chronological order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub frames: Vec<FeatureFrame>,
    pub targets: Vec<BTreeMap<String, f64>>,
    pub split: Vec<SplitTag>,
}

#[derive(Serialize, Deserialize)]
struct DatasetLine {
    frame: FeatureFrame,
    targets: BTreeMap<String, f64>,
    split: SplitTag,
}

impl Dataset {
    pub fn new(frames: Vec<FeatureFrame>, targets: Vec<BTreeMap<String, f64>>) -> Result<Self> {
        if frames.len() != targets.len() {
            return Err(Error::invalid("targets", "one target map per frame required"));
        }
        let split = vec![SplitTag::Train; frames.len()];
        Ok(Dataset { frames, targets, split })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.split.iter().enumerate().filter(|(_, t)| **t == tag).map(|(i, _)| i).collect()
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.split.iter().filter(|t| **t == tag).count()
    }

    /// Subset restricted to one split, order preserved.
    pub fn subset(&self, tag: SplitTag) -> Dataset {
        let idx = self.indices(tag);
        Dataset {
            frames: idx.iter().map(|&i| self.frames[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            split: vec![tag; idx.len()],
        }
    }

    pub fn append(&mut self, other: Dataset) {
        self.frames.extend(other.frames);
        self.targets.extend(other.targets);
        self.split.extend(other.split);
    }

    pub fn target(&self, i: usize, name: &str) -> Result<f64> {
        self.targets[i]
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("frame {i} has no target {name:?}")))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.len() {
            let line = DatasetLine {
                frame: self.frames[i].clone(),
                targets: self.targets[i].clone(),
                split: self.split[i],
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut ds = Dataset::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetLine = serde_json::from_str(&line)
                .map_err(|e| Error::Schema(format!("dataset line {}: {e}", n + 1)))?;
            ds.frames.push(rec.frame);
            ds.targets.push(rec.targets);
            ds.split.push(rec.split);
        }
        Ok(ds)
    }
}

/// Chronological split: floor counts for train and val, remainder to test.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64)) -> Result<Dataset> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(Error::invalid("ratios", "must be positive"));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("ratios", "must sum to 1"));
    }
    let n = ds.len();
    if n < 3 {
        return Err(Error::invalid("dataset", format!("need at least 3 frames, got {n}")));
    }
    let n_train = (n as f64 * tr + 1e-9).floor() as usize;
    let n_val = (n as f64 * va + 1e-9).floor() as usize;
    let mut out = ds.clone();
    for (i, tag) in out.split.iter_mut().enumerate() {
        *tag = if i < n_train {
            SplitTag::Train
        } else if i < n_train + n_val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_reading(t: f64, v: f64) -> SensorReading {
        SensorReading::ok(Channel::Temp, t, v)
    }

    #[test]
    fn synchronize_one_to_one() {
        let r = vec![temp_reading(0.0, 1.0), temp_reading(60.0, 2.0), temp_reading(120.0, 3.0)];
        let frames = synchronize(&r, 60.0).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(frames.iter().map(|f| f.values.temp).collect::<Vec<_>>(), vec![Some(1.0), Some(2.0), Some(3.0)]);
        assert_eq!(frames[1].values.level, None);
    }

    #[test]
    fn synchronize_floor_and_last_wins() {
        let r = vec![temp_reading(0.0, 1.0), temp_reading(63.0, 2.0), temp_reading(61.0, 9.0)];
        let frames = synchronize(&r, 60.0).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].tick_index, 1);
        assert_eq!(frames[1].timestamp_s, 60.0);
        assert_eq!(frames[1].values.temp, Some(2.0));
    }

    #[test]
    fn synchronize_rejects_negative_time() {
        let r = vec![SensorReading { timestamp_s: -1.0, ..temp_reading(0.0, 1.0) }];
        assert!(synchronize(&r, 60.0).is_err());
        assert!(synchronize(&[], 0.0).is_err());
    }

    #[test]
    fn missing_readings_leave_gaps() {
        let r = vec![temp_reading(0.0, 1.0), SensorReading::missing(Channel::Temp, 60.0)];
        let frames = synchronize(&r, 60.0).unwrap();
        assert_eq!(frames[1].values.temp, None);
    }

    #[test]
    fn impute_interior_head_tail() {
        let (v, f) = impute(&[Some(10.0), None, Some(14.0)]).unwrap();
        assert_eq!(v, vec![10.0, 12.0, 14.0]);
        assert_eq!(f, vec![false, true, false]);
        let (v, _) = impute(&[None, Some(5.0), Some(5.0)]).unwrap();
        assert_eq!(v, vec![5.0, 5.0, 5.0]);
        let (v, f) = impute(&[Some(1.0), Some(2.0), None, None]).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 2.0, 2.0]);
        assert_eq!(f, vec![false, false, true, true]);
    }

    #[test]
    fn impute_identity_and_all_missing() {
        let (v, f) = impute(&[Some(1.0), Some(3.0)]).unwrap();
        assert_eq!(v, vec![1.0, 3.0]);
        assert!(f.iter().all(|x| !x));
        assert!(impute(&[None, None]).is_err());
        assert!(impute(&[]).is_err());
    }

    #[test]
    fn single_spike_in_flat_series() {
        let r = detect_outliers(&[25.0, 25.0, 25.0, 100.0, 25.0], 5, 3.5, 0.5).unwrap();
        assert_eq!(r.flags, vec![false, false, false, true, false]);
        assert_eq!(r.cleaned[3], 25.0);
    }

    #[test]
    fn constant_series_has_no_outliers() {
        let r = detect_outliers(&[7.0; 20], 9, 3.5, 0.5).unwrap();
        assert!(r.flags.iter().all(|f| !f));
    }

    #[test]
    fn small_jitter_is_not_flagged() {
        // Hand oracle: median of all five is 25.0, absolute deviations are
        // {0.1, 0.1, 0.0, 0.2, 0.2} so MAD = 0.1; threshold 3.5 * 1.4826 * 0.1
        // = 0.51891 exceeds the largest deviation 0.2.
        let s = [24.9, 25.1, 25.0, 25.2, 24.8];
        let threshold: f64 = 3.5 * 1.4826 * 0.1;
        assert!((threshold - 0.51891).abs() < 1e-9);
        let r = detect_outliers(&s, 5, 3.5, 0.5).unwrap();
        assert!(r.flags.iter().all(|f| !f));
    }

    #[test]
    fn outlier_argument_errors() {
        assert!(matches!(detect_outliers(&[1.0; 4], 5, 3.5, 0.5), Err(Error::WindowTooLarge { .. })));
        assert!(detect_outliers(&[1.0; 4], 2, 3.5, 0.5).is_err());
        assert!(detect_outliers(&[1.0; 4], 3, 0.0, 0.5).is_err());
    }

    fn temp_frames(temps: &[f64]) -> Vec<FeatureFrame> {
        temps
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut v = PerChannel::from_fn(|_| 1.0);
                v.temp = t;
                FeatureFrame::from_values(i as u64, i as f64 * 60.0, v)
            })
            .collect()
    }

    #[test]
    fn rolling_mean_delta_slope() {
        let mut frames = temp_frames(&[25.0, 26.0, 27.0]);
        engineer_features(&mut frames, &[3]).unwrap();
        let last = &frames[2].engineered;
        assert!((last["temp_mean_3"] - 26.0).abs() < 1e-12);
        assert!((last["temp_slope_3"] - 1.0).abs() < 1e-12);
        assert!((last["temp_delta"] - 1.0).abs() < 1e-12);
        assert_eq!(frames[0].engineered["temp_delta"], 0.0);
        assert_eq!(frames[0].engineered["temp_slope_3"], 0.0);
        // Constant channels.
        assert_eq!(last["level_slope_3"], 0.0);
        assert_eq!(last["level_delta"], 0.0);
        assert!(engineer_features(&mut frames, &[]).is_err());
    }

    #[test]
    fn split_counts() {
        let ds = Dataset::new(temp_frames(&[0.0; 10]), vec![BTreeMap::new(); 10]).unwrap();
        let s = split(&ds, (0.7, 0.15, 0.15)).unwrap();
        assert_eq!((s.count(SplitTag::Train), s.count(SplitTag::Val), s.count(SplitTag::Test)), (7, 1, 2));
        let ds = Dataset::new(temp_frames(&[0.0; 100]), vec![BTreeMap::new(); 100]).unwrap();
        let s = split(&ds, (0.7, 0.15, 0.15)).unwrap();
        assert_eq!((s.count(SplitTag::Train), s.count(SplitTag::Val), s.count(SplitTag::Test)), (70, 15, 15));
    }

    #[test]
    fn split_errors() {
        let ds = Dataset::new(temp_frames(&[0.0; 2]), vec![BTreeMap::new(); 2]).unwrap();
        assert!(split(&ds, (0.7, 0.15, 0.15)).is_err());
        let ds = Dataset::new(temp_frames(&[0.0; 10]), vec![BTreeMap::new(); 10]).unwrap();
        assert!(split(&ds, (0.7, 0.2, 0.2)).is_err());
        assert!(split(&ds, (1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn clean_frames_fills_everything() {
        let mut readings = Vec::new();
        for i in 0..30 {
            let t = i as f64 * 60.0;
            for ch in Channel::ALL {
                if i % 7 == 3 && ch == Channel::Ph {
                    readings.push(SensorReading::missing(ch, t));
                } else {
                    readings.push(SensorReading::ok(ch, t, 20.0 + (i % 3) as f64 * 0.1));
                }
            }
        }
        let raw = synchronize(&readings, 60.0).unwrap();
        let frames = clean_frames(&raw, &CleanOptions::default()).unwrap();
        assert_eq!(frames.len(), 30);
        for f in &frames {
            f.ensure_complete().unwrap();
        }
        assert!(frames[3].flags.ph.was_missing);
        assert!(frames[3].engineered.contains_key("ph_mean_60"));
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let mut targets = BTreeMap::new();
        targets.insert("y".to_string(), 1.5);
        let ds = split(&Dataset::new(temp_frames(&[1.0, 2.0, 3.0]), vec![targets; 3]).unwrap(), (0.4, 0.3, 0.3)).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, ds);
        assert!(String::from_utf8(buf).unwrap().lines().next().unwrap().contains("\"split\":\"train\""));
    }
}
