//! The task that owns the event log: the live control loop, or a replay.
//!
//! API handlers never touch loop state directly. They send a [`Command`] and
//! await the reply, so every override, setpoint and acknowledgment lands
//! between two ticks and is in force for the next one.

use std::sync::Arc;
use std::time::Duration;

use aquafarm_core::control::{Alert, AlertCode, ControlDecision, Severity};
use aquafarm_core::episode::{episode_seed, EpisodeRecord};
use aquafarm_core::ml::arbitrate::MlMode;
use aquafarm_core::ml::bundle::ModelBundle;
use aquafarm_core::pipeline::FarmController;
use aquafarm_core::sim::LivePlant;
use aquafarm_core::{ControlConfig, FarmState, FeatureFrame, PlantParams, RunConfig, SensorReading};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{mpsc, oneshot};

use crate::alerts::{ActiveAlert, AlertChange, AlertLedger, UnknownAlert};
use crate::event::{EventKind, EventRecord};
use crate::log::EventLog;
use crate::overrides::{ActiveOverride, OverrideAction, OverrideRequest, OverrideSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingPayload {
    pub tick: u64,
    pub t: f64,
    pub readings: Vec<SensorReading>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<FeatureFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPayload {
    pub tick: u64,
    pub t: f64,
    /// Plant state the readings were taken from.
    pub state: FarmState,
    pub decision: ControlDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointPayload {
    pub control: ControlConfig,
    pub mode: MlMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideChange {
    On,
    Off,
    Release,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverridePayload {
    pub change: OverrideChange,
    pub device: aquafarm_core::Device,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<ActiveOverride>,
}

/// Everything `GET /api/state` reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateView {
    /// Index of the next tick to run.
    pub tick: u64,
    pub time_s: f64,
    pub mode: MlMode,
    pub replay: bool,
    pub frame: Option<FeatureFrame>,
    pub decision: Option<ControlDecision>,
    pub alerts: Vec<ActiveAlert>,
    pub overrides: Vec<ActiveOverride>,
    pub control: ControlConfig,
    pub last_seq: u64,
    pub storage_ok: bool,
}

/// Reply to a mutating command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandAck {
    /// Seq of the last event the command appended.
    pub seq: u64,
    /// False when the event is only held in memory because storage failed.
    pub persisted: bool,
    pub result: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    UnknownAlert(#[from] UnknownAlert),
    #[error("{0}")]
    Conflict(String),
    #[error("control loop is not running")]
    Stopped,
}

type Reply<T> = oneshot::Sender<Result<T, CommandError>>;

pub enum Command {
    State(oneshot::Sender<StateView>),
    Override(OverrideRequest, Reply<CommandAck>),
    /// Partial ControlConfig document merged over the current one.
    Setpoints(Value, Reply<CommandAck>),
    Ack(u64, Reply<CommandAck>),
    Mode(MlMode, Reply<CommandAck>),
    /// Runs `n` ticks now and replies with the last seq.
    Step(u64, oneshot::Sender<Result<u64, CommandError>>),
    /// Flushes the log and stops the task.
    Shutdown(oneshot::Sender<()>),
}

/// Cloneable sender side used by the API and by tests.
#[derive(Clone)]
pub struct Handle {
    tx: mpsc::Sender<Command>,
}

impl Handle {
    async fn call<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Result<T, CommandError> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(make(tx)).await.map_err(|_| CommandError::Stopped)?;
        rx.await.map_err(|_| CommandError::Stopped)
    }

    pub async fn state(&self) -> Result<StateView, CommandError> {
        self.call(Command::State).await
    }

    pub async fn apply_override(&self, req: OverrideRequest) -> Result<CommandAck, CommandError> {
        self.call(|r| Command::Override(req, r)).await?
    }

    pub async fn setpoints(&self, patch: Value) -> Result<CommandAck, CommandError> {
        self.call(|r| Command::Setpoints(patch, r)).await?
    }

    pub async fn acknowledge(&self, id: u64) -> Result<CommandAck, CommandError> {
        self.call(|r| Command::Ack(id, r)).await?
    }

    pub async fn set_mode(&self, mode: MlMode) -> Result<CommandAck, CommandError> {
        self.call(|r| Command::Mode(mode, r)).await?
    }

    pub async fn step(&self, n: u64) -> Result<u64, CommandError> {
        self.call(|r| Command::Step(n, r)).await?
    }

    pub async fn shutdown(&self) {
        let _ = self.call(Command::Shutdown).await;
    }
}

pub fn channel() -> (Handle, mpsc::Receiver<Command>) {
    let (tx, rx) = mpsc::channel(64);
    (Handle { tx }, rx)
}

/// The live simulation, controller and ledgers, owned by one task.
pub struct ControlLoop {
    controller: FarmController,
    plant: LivePlant,
    tick: u64,
    log: EventLog,
    alerts: AlertLedger,
    overrides: OverrideSet,
    last_frame: Option<FeatureFrame>,
    last_decision: Option<ControlDecision>,
    storage_error: Option<String>,
}

impl ControlLoop {
    /// Builds the loop and resumes the episode, overrides, alerts and setpoints recorded in `log`.
    pub fn new(cfg: &RunConfig, bundle: Option<Arc<ModelBundle>>, log: EventLog) -> aquafarm_core::Result<Self> {
        cfg.validate()?;
        let mut controller = FarmController::new(cfg.control.clone(), cfg.clean_options());
        let mode = if bundle.as_ref().is_some_and(|b| b.is_trained()) { cfg.service.mode } else { MlMode::RuleOnly };
        if let Some(b) = bundle {
            controller = controller.with_models(b, mode);
        }
        let mut alerts = AlertLedger::new();
        let mut overrides = OverrideSet::default();
        let mut last: Option<DecisionPayload> = None;
        for ev in log.reader().all() {
            match ev.kind {
                EventKind::SetpointChange => {
                    if let Ok(p) = serde_json::from_value::<SetpointPayload>(ev.payload) {
                        controller.config = p.control;
                        if controller.bundle.is_some() {
                            controller.mode = p.mode;
                        }
                    }
                }
                EventKind::Override => {
                    if let Ok(p) = serde_json::from_value::<OverridePayload>(ev.payload) {
                        match p.entry {
                            Some(o) if matches!(p.change, OverrideChange::On | OverrideChange::Off) => overrides.insert(o),
                            _ => {
                                overrides.apply(
                                    &OverrideRequest {
                                        device: p.device,
                                        action: OverrideAction::Release,
                                        ttl_s: None,
                                        operator_id: String::new(),
                                    },
                                    ev.timestamp_s,
                                )
                                .ok();
                            }
                        }
                    }
                }
                EventKind::Alert => {
                    if let Ok(c) = serde_json::from_value::<AlertChange>(ev.payload) {
                        alerts.restore(&c);
                    }
                }
                EventKind::Decision => last = serde_json::from_value(ev.payload).ok().or(last),
                EventKind::Reading => {}
            }
        }
        // Each session draws fresh plant and sensor streams; the plant state itself carries over.
        let params = PlantParams { seed: episode_seed(cfg.seed, log.session() - 1), ..cfg.plant.clone() };
        let (initial, tick) = match &last {
            Some(p) => (p.state.clone(), p.tick + 1),
            None => (cfg.episode.initial.clone(), 0),
        };
        let mut plant = LivePlant::new(initial, params, cfg.sensors.clone())?;
        if let Some(p) = &last {
            plant.advance(&p.decision.commands)?;
        }
        Ok(ControlLoop {
            controller,
            plant,
            tick,
            log,
            alerts,
            overrides,
            last_frame: None,
            last_decision: last.map(|p| p.decision),
            storage_error: None,
        })
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    fn append(&mut self, kind: EventKind, t: f64, payload: impl Serialize) -> (u64, bool) {
        let payload = serde_json::to_value(payload).expect("payload serializes");
        match self.log.append(kind, t, payload) {
            Ok(r) => {
                self.storage_error = None;
                (r.seq, true)
            }
            Err(fault) => {
                self.storage_error = Some(fault.error.to_string());
                (fault.record.seq, false)
            }
        }
    }

    fn append_alert_changes(&mut self, changes: Vec<AlertChange>, t: f64) -> (u64, bool) {
        let mut out = (self.log.last_seq(), true);
        for c in changes {
            out = self.append(EventKind::Alert, t, c);
        }
        out
    }

    /// One control tick. Readings and the cleaned frame are logged before the decision.
    pub fn tick(&mut self) -> aquafarm_core::Result<()> {
        let t = self.plant.state.time_s;
        for o in self.overrides.expire(t) {
            let p = OverridePayload { change: OverrideChange::Expired, device: o.device, entry: Some(o) };
            self.append(EventKind::Override, t, p);
        }
        let readings = self.plant.read();
        let frame = self.controller.ingest(self.tick, t, &readings);
        self.append(
            EventKind::Reading,
            t,
            ReadingPayload { tick: self.tick, t, readings, frame: Some(frame.clone()) },
        );
        self.controller.overrides = self.overrides.commands();
        let mut decision = self.controller.decide_frame(&frame)?;
        if let Some(e) = &self.storage_error {
            let msg = format!("event log unwritable, buffering in memory: {e}");
            decision.alerts.push(Alert::new(AlertCode::StorageFault, Severity::Warning, t, msg));
        }
        let state = self.plant.state.clone();
        self.append(
            EventKind::Decision,
            t,
            DecisionPayload { tick: self.tick, t, state, decision: decision.clone() },
        );
        let changes = self.alerts.observe(&decision.alerts, t);
        self.append_alert_changes(changes, t);
        self.plant.advance(&decision.commands)?;
        self.last_frame = Some(frame);
        self.last_decision = Some(decision);
        self.tick += 1;
        Ok(())
    }

    pub fn view(&self) -> StateView {
        StateView {
            tick: self.tick,
            time_s: self.plant.state.time_s,
            mode: self.controller.mode,
            replay: false,
            frame: self.last_frame.clone(),
            decision: self.last_decision.clone(),
            alerts: self.alerts.active(),
            overrides: self.overrides.list(),
            control: self.controller.config.clone(),
            last_seq: self.log.last_seq(),
            storage_ok: self.storage_error.is_none(),
        }
    }

    fn ack(&self, (seq, persisted): (u64, bool), result: impl Serialize) -> CommandAck {
        CommandAck { seq, persisted, result: serde_json::to_value(result).expect("result serializes") }
    }

    pub fn apply_override(&mut self, req: OverrideRequest) -> Result<CommandAck, CommandError> {
        // Requests take effect from the next tick, so they are issued at its time.
        let t = self.plant.state.time_s;
        let entry = self.overrides.apply(&req, t).map_err(|e| CommandError::Invalid(e.to_string()))?;
        let change = match req.action {
            OverrideAction::On => OverrideChange::On,
            OverrideAction::Off => OverrideChange::Off,
            OverrideAction::Release => OverrideChange::Release,
        };
        let w = self.append(EventKind::Override, t, OverridePayload { change, device: req.device, entry });
        Ok(self.ack(w, self.overrides.list()))
    }

    pub fn update_setpoints(&mut self, patch: Value) -> Result<CommandAck, CommandError> {
        let Value::Object(fields) = patch else {
            return Err(CommandError::Invalid("setpoints must be a JSON object".into()));
        };
        let mut doc = serde_json::to_value(&self.controller.config).expect("config serializes");
        merge(&mut doc, Value::Object(fields));
        let next: ControlConfig = serde_json::from_value(doc).map_err(|e| CommandError::Invalid(e.to_string()))?;
        next.validate().map_err(|e| CommandError::Invalid(e.to_string()))?;
        self.controller.config = next;
        self.log_setpoints()
    }

    pub fn set_mode(&mut self, mode: MlMode) -> Result<CommandAck, CommandError> {
        if mode == MlMode::MlAssist && !self.controller.bundle.as_ref().is_some_and(|b| b.is_trained()) {
            return Err(CommandError::Conflict("ml_assist needs a trained model bundle (serve --bundle)".into()));
        }
        self.controller.mode = mode;
        self.log_setpoints()
    }

    fn log_setpoints(&mut self) -> Result<CommandAck, CommandError> {
        let p = SetpointPayload { control: self.controller.config.clone(), mode: self.controller.mode };
        let w = self.append(EventKind::SetpointChange, self.plant.state.time_s, &p);
        Ok(self.ack(w, p))
    }

    pub fn acknowledge(&mut self, id: u64) -> Result<CommandAck, CommandError> {
        let changes = self.alerts.acknowledge(id)?;
        let result = changes.clone();
        let w = self.append_alert_changes(changes, self.plant.state.time_s);
        Ok(self.ack(w, result))
    }

    /// Serves commands, ticking every `period`; with `None` ticks only run on [`Command::Step`].
    pub async fn run(mut self, mut rx: mpsc::Receiver<Command>, period: Option<Duration>) {
        let mut interval = period.map(|p| {
            let mut i = tokio::time::interval(p);
            i.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            i
        });
        loop {
            let next_tick = async {
                match interval.as_mut() {
                    Some(i) => {
                        i.tick().await;
                    }
                    None => std::future::pending::<()>().await,
                }
            };
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    None => break,
                    Some(Command::Shutdown(done)) => {
                        let _ = self.log.flush();
                        let _ = done.send(());
                        return;
                    }
                    Some(cmd) => self.handle(cmd),
                },
                _ = next_tick => {
                    if let Err(e) = self.tick() {
                        eprintln!("control tick failed: {e}");
                    }
                }
            }
        }
        let _ = self.log.flush();
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::State(r) => {
                let _ = r.send(self.view());
            }
            Command::Override(req, r) => {
                let _ = r.send(self.apply_override(req));
            }
            Command::Setpoints(p, r) => {
                let _ = r.send(self.update_setpoints(p));
            }
            Command::Ack(id, r) => {
                let _ = r.send(self.acknowledge(id));
            }
            Command::Mode(m, r) => {
                let _ = r.send(self.set_mode(m));
            }
            Command::Step(n, r) => {
                let res = (0..n).try_for_each(|_| self.tick()).map_err(|e| CommandError::Invalid(e.to_string()));
                let _ = r.send(res.map(|_| self.log.last_seq()));
            }
            Command::Shutdown(_) => unreachable!("handled by run"),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// One item of a recorded log to re-emit.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEvent {
    pub kind: EventKind,
    pub timestamp_s: f64,
    pub payload: Value,
}

impl From<EventRecord> for ReplayEvent {
    fn from(r: EventRecord) -> Self {
        ReplayEvent { kind: r.kind, timestamp_s: r.timestamp_s, payload: r.payload }
    }
}

/// Converts episode records into the reading and decision events the live loop would log.
pub fn episode_events(records: &[EpisodeRecord]) -> Vec<ReplayEvent> {
    let mut out = Vec::with_capacity(records.len() * 2);
    for (i, r) in records.iter().enumerate() {
        let reading = ReadingPayload { tick: i as u64, t: r.t, readings: r.readings.clone(), frame: None };
        out.push(ReplayEvent { kind: EventKind::Reading, timestamp_s: r.t, payload: json!(reading) });
        let decision = DecisionPayload { tick: i as u64, t: r.t, state: r.state.clone(), decision: r.decision.clone() };
        out.push(ReplayEvent { kind: EventKind::Decision, timestamp_s: r.t, payload: json!(decision) });
    }
    out
}

/// Re-emits a recorded log in order, pacing by simulated time divided by `speed`.
/// A speed of 0 replays as fast as possible. Mutating commands are rejected.
pub struct Replay {
    log: EventLog,
    events: Vec<ReplayEvent>,
    speed: f64,
    last_decision: Option<DecisionPayload>,
    last_frame: Option<FeatureFrame>,
}

impl Replay {
    pub fn new(log: EventLog, events: Vec<ReplayEvent>, speed: f64) -> Self {
        Replay { log, events, speed, last_decision: None, last_frame: None }
    }

    fn view(&self) -> StateView {
        StateView {
            tick: self.last_decision.as_ref().map_or(0, |d| d.tick + 1),
            time_s: self.last_decision.as_ref().map_or(0.0, |d| d.t),
            mode: MlMode::RuleOnly,
            replay: true,
            frame: self.last_frame.clone(),
            decision: self.last_decision.as_ref().map(|d| d.decision.clone()),
            alerts: Vec::new(),
            overrides: Vec::new(),
            control: ControlConfig::default(),
            last_seq: self.log.last_seq(),
            storage_ok: self.log.pending() == 0,
        }
    }

    /// Emits every event, then keeps answering state queries until shut down or `rx` closes.
    /// `done` fires once the last event is appended.
    pub async fn run(mut self, mut rx: mpsc::Receiver<Command>, done: Option<oneshot::Sender<u64>>) {
        let events = std::mem::take(&mut self.events);
        let mut prev_t: Option<f64> = None;
        let mut done = done;
        let mut it = events.into_iter();
        loop {
            let next = it.next();
            let delay = match (&next, prev_t) {
                (Some(e), Some(p)) if self.speed > 0.0 => ((e.timestamp_s - p) / self.speed).max(0.0),
                _ => 0.0,
            };
            let Some(e) = next else {
                if let Some(d) = done.take() {
                    let _ = self.log.flush();
                    let _ = d.send(self.log.last_seq());
                }
                // Nothing left to emit; serve commands until shutdown.
                loop {
                    match rx.recv().await {
                        None => return,
                        Some(cmd) => {
                            if self.handle(cmd) {
                                return;
                            }
                        }
                    }
                }
            };
            let sleep = tokio::time::sleep(Duration::from_secs_f64(delay));
            tokio::pin!(sleep);
            loop {
                tokio::select! {
                    _ = &mut sleep => break,
                    cmd = rx.recv() => match cmd {
                        None => return,
                        Some(cmd) => if self.handle(cmd) { return },
                    },
                }
            }
            prev_t = Some(e.timestamp_s);
            match e.kind {
                EventKind::Decision => self.last_decision = serde_json::from_value(e.payload.clone()).ok(),
                EventKind::Reading => {
                    self.last_frame = serde_json::from_value::<ReadingPayload>(e.payload.clone()).ok().and_then(|p| p.frame)
                }
                _ => {}
            }
            let _ = self.log.append(e.kind, e.timestamp_s, e.payload);
        }
    }

    /// Returns true when the task should stop.
    fn handle(&mut self, cmd: Command) -> bool {
        let busy = || CommandError::Conflict("replaying a recorded log; commands are disabled".into());
        match cmd {
            Command::State(r) => {
                let _ = r.send(self.view());
            }
            Command::Override(_, r) | Command::Setpoints(_, r) | Command::Ack(_, r) | Command::Mode(_, r) => {
                let _ = r.send(Err(busy()));
            }
            Command::Step(_, r) => {
                let _ = r.send(Err(busy()));
            }
            Command::Shutdown(done) => {
                let _ = self.log.flush();
                let _ = done.send(());
                return true;
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_recursive() {
        let mut a = json!({"x": 1, "s": {"a": 1, "b": 2}});
        merge(&mut a, json!({"s": {"b": 3}, "y": 4}));
        assert_eq!(a, json!({"x": 1, "s": {"a": 1, "b": 3}, "y": 4}));
    }
}
