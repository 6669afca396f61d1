//! Telemetry and operator service for the farm controller.
//!
//! One task owns the append-only [`log::EventLog`] and runs the control loop
//! (or a replay). The HTTP API reads history and live events through an
//! [`log::EventReader`] and sends every mutation to that task as a message.

pub mod alerts;
pub mod api;
pub mod driver;
pub mod event;
pub mod log;
pub mod overrides;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use aquafarm_core::ml::bundle::ModelBundle;
use aquafarm_core::RunConfig;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use driver::{CommandAck, CommandError, Handle, StateView};
pub use event::{EventKind, EventRecord};
pub use log::{EventLog, EventReader};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Log(#[from] log::LogError),
    #[error(transparent)]
    Core(#[from] aquafarm_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid value for {var}: {value:?}")]
    Env { var: &'static str, value: String },
}

/// Applies `AQF_PORT` and `AQF_DATA_DIR` from `lookup` over the service section.
pub fn apply_env(cfg: &mut RunConfig, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
    if let Some(v) = lookup("AQF_PORT") {
        cfg.service.port = v.parse().map_err(|_| ServiceError::Env { var: "AQF_PORT", value: v })?;
    }
    if let Some(v) = lookup("AQF_DATA_DIR") {
        cfg.service.data_dir = v;
    }
    Ok(())
}

fn models_body(bundle: Option<&ModelBundle>) -> Value {
    match bundle {
        Some(b) => json!({
            "trained": b.is_trained(),
            "format_version": b.format_version,
            "metadata": b.metadata,
        }),
        None => json!({ "trained": false }),
    }
}

/// A running service: the driver task plus the HTTP server.
pub struct Service {
    pub addr: SocketAddr,
    pub handle: Handle,
    pub reader: EventReader,
    driver: JoinHandle<()>,
    server: JoinHandle<std::io::Result<()>>,
    stop: oneshot::Sender<()>,
}

impl Service {
    fn spawn(listener: TcpListener, handle: Handle, reader: EventReader, models: Value, driver: JoinHandle<()>) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let app = api::router(api::AppState { handle: handle.clone(), reader: reader.clone(), models: Arc::new(models) });
        let (stop, stopped) = oneshot::channel::<()>();
        let server = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await
        });
        Ok(Service { addr, handle, reader, driver, server, stop })
    }

    /// Starts the live control loop with its log under `data_dir` (in memory when `None`).
    /// `tick_period` of `None` means ticks only run on request.
    pub async fn start(
        cfg: &RunConfig,
        bundle: Option<Arc<ModelBundle>>,
        listener: TcpListener,
        data_dir: Option<PathBuf>,
        tick_period: Option<Duration>,
    ) -> Result<Self, ServiceError> {
        let log = match &data_dir {
            Some(d) => EventLog::open(d, cfg.service.fsync)?,
            None => EventLog::in_memory(),
        };
        Self::start_with_log(cfg, bundle, listener, log, tick_period).await
    }

    pub async fn start_with_log(
        cfg: &RunConfig,
        bundle: Option<Arc<ModelBundle>>,
        listener: TcpListener,
        log: EventLog,
        tick_period: Option<Duration>,
    ) -> Result<Self, ServiceError> {
        let models = models_body(bundle.as_deref());
        let reader = log.reader();
        let control = driver::ControlLoop::new(cfg, bundle, log)?;
        let (handle, rx) = driver::channel();
        let task = tokio::spawn(control.run(rx, tick_period));
        Ok(Self::spawn(listener, handle, reader, models, task)?)
    }

    /// Serves a replay of `events`; the receiver yields the last seq once all are emitted.
    pub fn replay(
        log: EventLog,
        events: Vec<driver::ReplayEvent>,
        speed: f64,
        listener: TcpListener,
    ) -> Result<(Self, oneshot::Receiver<u64>), ServiceError> {
        let reader = log.reader();
        let (handle, rx) = driver::channel();
        let (done_tx, done_rx) = oneshot::channel();
        let task = tokio::spawn(driver::Replay::new(log, events, speed).run(rx, Some(done_tx)));
        Ok((Self::spawn(listener, handle, reader, json!({ "trained": false }), task)?, done_rx))
    }

    /// Flushes the log, stops the driver and lets in-flight requests finish.
    pub async fn shutdown(self) {
        self.handle.shutdown().await;
        let _ = self.driver.await;
        let _ = self.stop.send(());
        let _ = self.server.await;
    }

    /// Stops both tasks without flushing, as a crash would.
    pub fn kill(self) {
        self.driver.abort();
        self.server.abort();
    }
}
