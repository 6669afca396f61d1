//! The `aquafarm` command line.
//!
//! Exit codes: 0 on success, 1 for runtime failures, 2 for usage or
//! configuration errors, 3 for corrupt input data.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use aquafarm_core::episode::{self, read_jsonl, write_jsonl, EpisodeRecord};
use aquafarm_core::ml::arbitrate::MlMode;
use aquafarm_core::ml::bundle::{evaluate, train_bundle, ModelBundle};
use aquafarm_core::preprocess::{Dataset, SplitTag};
use aquafarm_core::{ExecMode, RunConfig};
use aquafarm_telemetry::driver::{episode_events, ReplayEvent};
use aquafarm_telemetry::log::{EventLog, LogError};
use aquafarm_telemetry::{EventRecord, Service};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "aquafarm", version, about = "Simulated fish-farm control: simulate, train, evaluate, serve, replay")]
pub struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true, env = "AQF_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run closed-loop episodes and write one JSONL log per episode.
    Simulate {
        #[arg(long)]
        ticks: Option<u64>,
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<MlMode>,
        /// Model bundle, needed for ml_assist.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Build a split dataset (train/val/test JSONL) from episode logs, simulating them if no input is given.
    Prepare {
        #[arg(long)]
        out: PathBuf,
        /// Directory of episode logs written by `simulate`.
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
    /// Fit all four models on a prepared dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics report; defaults to `<out>.metrics.json`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print metrics of a bundle on one split of a dataset as JSON.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: SplitTag,
    },
    /// Run the live control loop with the HTTP API until interrupted.
    Serve {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Re-stream a recorded event log or episode log through the API.
    Replay {
        log: PathBuf,
        /// Simulated-time multiplier; 0 replays as fast as possible.
        #[arg(long, default_value_t = 0.0)]
        speed: f64,
        #[arg(long)]
        port: Option<u16>,
        /// Persist the re-emitted events here; in memory when omitted.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Exit after the last event instead of serving until interrupted.
        #[arg(long)]
        exit_when_done: bool,
    },
    /// Print the effective configuration as JSON.
    Config,
}

fn parse_mode(s: &str) -> Result<MlMode, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<SplitTag, String> {
    match s {
        "train" => Ok(SplitTag::Train),
        "val" => Ok(SplitTag::Val),
        "test" => Ok(SplitTag::Test),
        _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Corrupt(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Corrupt(_) => 3,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| runtime(format!("{}: {e}", path.display()))
}

/// Config file (if any), then `AQF_*` variables, then `--seed`.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    aquafarm_telemetry::apply_env(&mut cfg, |k| std::env::var(k).ok()).map_err(usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate { ticks, episodes, out, mode, bundle } => simulate(cfg, ticks, episodes, &out, mode, bundle.as_deref()),
        Command::Prepare { out, episodes } => prepare(&cfg, &out, episodes.as_deref()),
        Command::Train { dataset, out, metrics } => train(&cfg, &dataset, &out, metrics),
        Command::Evaluate { bundle, dataset, split } => {
            let m = evaluate_cmd(&bundle, &dataset, split)?;
            emit(&serde_json::to_string_pretty(&m).expect("metrics serialize"))
        }
        Command::Serve { bundle, port, data_dir } => serve(cfg, bundle.as_deref(), port, data_dir),
        Command::Replay { log, speed, port, data_dir, exit_when_done } => {
            replay(&cfg, &log, speed, port, data_dir.as_deref(), exit_when_done)
        }
        Command::Config => {
            emit(&serde_json::to_string_pretty(&cfg).expect("config serializes"))
        }
    }
}

/// Writes to stdout; a reader that went away is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
        _ => Ok(()),
    }
}

pub fn episode_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("episode-{index:04}.jsonl"))
}

fn load_bundle(path: &Path) -> Result<ModelBundle, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let b = ModelBundle::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if !b.is_trained() {
        return Err(usage(format!("{}: bundle is not trained", path.display())));
    }
    Ok(b)
}

pub fn simulate(
    mut cfg: RunConfig,
    ticks: Option<u64>,
    episodes: Option<u64>,
    out: &Path,
    mode: Option<MlMode>,
    bundle: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(t) = ticks {
        cfg.episode.ticks = t;
    }
    if let Some(n) = episodes {
        cfg.episode.episodes = n;
    }
    cfg.validate().map_err(usage)?;
    let mode = mode.unwrap_or(cfg.service.mode);
    let bundle = match bundle {
        Some(p) => Some(Arc::new(load_bundle(p)?)),
        None if mode == MlMode::MlAssist => return Err(usage("--mode ml_assist needs --bundle")),
        None => None,
    };
    let runs = episode::simulate_run(&cfg, bundle, mode, ExecMode::Sequential).map_err(runtime)?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    for (i, records) in runs.iter().enumerate() {
        let path = episode_path(out, i);
        let f = File::create(&path).map_err(io_at(&path))?;
        write_jsonl(records, BufWriter::new(f)).map_err(runtime)?;
    }
    eprintln!("wrote {} episode(s) of {} ticks to {}", runs.len(), cfg.episode.ticks, out.display());
    Ok(())
}

/// Reads an episode log; a line that does not parse is corruption.
pub fn read_episode(path: &Path) -> Result<Vec<EpisodeRecord>, CliError> {
    let f = File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    read_jsonl(BufReader::new(f)).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))
}

pub fn prepare(cfg: &RunConfig, out: &Path, episodes: Option<&Path>) -> Result<(), CliError> {
    let runs = match episodes {
        Some(dir) => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| usage(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(usage(format!("{}: no episode logs", dir.display())));
            }
            files.iter().map(|f| read_episode(f)).collect::<Result<Vec<_>, _>>()?
        }
        None => episode::simulate_run(cfg, None, MlMode::RuleOnly, ExecMode::Sequential).map_err(runtime)?,
    };
    let ds = episode::dataset_from_run(&runs, cfg).map_err(usage)?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    for (tag, name) in SPLITS {
        let path = out.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(io_at(&path))?);
        ds.subset(tag).write_jsonl(&mut w).map_err(runtime)?;
        w.flush().map_err(io_at(&path))?;
    }
    eprintln!(
        "dataset: {} train, {} val, {} test frames in {}",
        ds.count(SplitTag::Train),
        ds.count(SplitTag::Val),
        ds.count(SplitTag::Test),
        out.display()
    );
    Ok(())
}

const SPLITS: [(SplitTag, &str); 3] = [(SplitTag::Train, "train.jsonl"), (SplitTag::Val, "val.jsonl"), (SplitTag::Test, "test.jsonl")];

/// Loads the three split files; a missing split is a usage error, an unparsable line is corruption.
pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let mut ds = Dataset::default();
    for (tag, name) in SPLITS {
        let path = dir.join(name);
        let f = File::open(&path).map_err(|e| usage(format!("missing split {}: {e}", path.display())))?;
        let part = Dataset::read_jsonl(BufReader::new(f)).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))?;
        if part.is_empty() {
            return Err(usage(format!("split {} is empty", path.display())));
        }
        if part.split.iter().any(|t| *t != tag) {
            return Err(CliError::Corrupt(format!("{}: rows tagged for another split", path.display())));
        }
        ds.append(part);
    }
    Ok(ds)
}

pub fn train(cfg: &RunConfig, dataset: &Path, out: &Path, metrics: Option<PathBuf>) -> Result<(), CliError> {
    let ds = load_dataset(dataset)?;
    let ml = aquafarm_core::ml::bundle::MlConfig { seed: cfg.seed, ..cfg.ml.clone() };
    let (bundle, report) = train_bundle(&ds, &ml, &cfg.control, ExecMode::Sequential).map_err(usage)?;
    fs::write(out, bundle.to_json().map_err(runtime)?).map_err(io_at(out))?;
    let metrics = metrics.unwrap_or_else(|| out.with_extension("metrics.json"));
    let body = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&metrics, body).map_err(io_at(&metrics))?;
    eprintln!("bundle {} and metrics {}", out.display(), metrics.display());
    Ok(())
}

pub fn evaluate_cmd(bundle: &Path, dataset: &Path, split: SplitTag) -> Result<serde_json::Value, CliError> {
    let b = load_bundle(bundle)?;
    let ds = load_dataset(dataset)?;
    let m = evaluate(&b, &ds, split).map_err(usage)?;
    Ok(json!({
        "split": split,
        "n_frames": m.n_frames,
        "forest_test_mse": m.forest_test_mse,
        "forest_baseline_mse": m.forest_baseline_mse,
        "svm_accuracy": m.svm_accuracy,
        "svm_recall": m.svm_recall,
        "svm_false_positive_rate": m.svm_false_positive_rate,
        "gbm_test_mse": m.gbm_test_mse,
        "gbm_baseline_mse": m.gbm_baseline_mse,
        "mlp_agreement": m.mlp_agreement,
    }))
}

fn runtime_builder() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)
}

async fn bind(port: u16) -> Result<tokio::net::TcpListener, CliError> {
    tokio::net::TcpListener::bind(("0.0.0.0", port)).await.map_err(|e| usage(format!("port {port}: {e}")))
}

async fn until_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn log_error(e: LogError) -> CliError {
    match e {
        LogError::Corrupt { .. } => CliError::Corrupt(e.to_string()),
        LogError::Io(_) => runtime(e),
    }
}

pub fn serve(cfg: RunConfig, bundle: Option<&Path>, port: Option<u16>, data_dir: Option<PathBuf>) -> Result<(), CliError> {
    cfg.validate().map_err(usage)?;
    let bundle = bundle.map(load_bundle).transpose()?.map(Arc::new);
    if bundle.is_none() && cfg.service.mode == MlMode::MlAssist {
        return Err(usage("service.mode ml_assist needs --bundle"));
    }
    let port = port.unwrap_or(cfg.service.port);
    let dir = data_dir.unwrap_or_else(|| PathBuf::from(&cfg.service.data_dir));
    let period = (cfg.service.tick_period_ms > 0).then(|| Duration::from_millis(cfg.service.tick_period_ms));
    runtime_builder()?.block_on(async move {
        let listener = bind(port).await?;
        let log = EventLog::open(&dir, cfg.service.fsync).map_err(log_error)?;
        let s = Service::start_with_log(&cfg, bundle, listener, log, period).await.map_err(runtime)?;
        eprintln!("listening on {} (events in {})", s.addr, dir.display());
        until_signal().await;
        s.shutdown().await;
        eprintln!("stopped; log flushed");
        Ok(())
    })
}

/// Events of a recorded log, accepting service event logs and episode logs.
pub fn load_replay(path: &Path) -> Result<Vec<ReplayEvent>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let is_events = serde_json::from_str::<serde_json::Value>(first).is_ok_and(|v| v.get("seq").is_some());
    if is_events {
        let mut out = Vec::new();
        let mut prev: Option<u64> = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let corrupt = |reason: String| CliError::Corrupt(format!("{}: line {}: {reason}", path.display(), i + 1));
            let r: EventRecord = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            if prev.is_some_and(|p| r.seq != p + 1) {
                return Err(corrupt(format!("seq {} does not follow {}", r.seq, prev.unwrap_or(0))));
            }
            prev = Some(r.seq);
            out.push(r.into());
        }
        Ok(out)
    } else {
        Ok(episode_events(&read_episode(path)?))
    }
}

pub fn replay(
    cfg: &RunConfig,
    path: &Path,
    speed: f64,
    port: Option<u16>,
    data_dir: Option<&Path>,
    exit_when_done: bool,
) -> Result<(), CliError> {
    if !(speed >= 0.0 && speed.is_finite()) {
        return Err(usage("--speed must be a finite number >= 0"));
    }
    let events = load_replay(path)?;
    let port = port.unwrap_or(cfg.service.port);
    let fsync = cfg.service.fsync;
    runtime_builder()?.block_on(async move {
        let listener = bind(port).await?;
        let log = match data_dir {
            Some(d) => EventLog::open(d, fsync).map_err(log_error)?,
            None => EventLog::in_memory(),
        };
        let n = events.len();
        let (s, done) = Service::replay(log, events, speed, listener).map_err(runtime)?;
        eprintln!("replaying {n} events on {}", s.addr);
        if exit_when_done {
            let _ = done.await;
        } else {
            until_signal().await;
        }
        s.shutdown().await;
        Ok(())
    })
}
