use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use aquafarm_core::control::{AlertCode, Source};
use aquafarm_core::{FarmState, RunConfig, SensorConfig};
use aquafarm_telemetry::driver::{episode_events, DecisionPayload, ReplayEvent};
use aquafarm_telemetry::log::{read_event_file, Sink};
use aquafarm_telemetry::{EventKind, EventLog, EventRecord, Service};
use futures::StreamExt;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpListener;

fn config(initial: FarmState) -> RunConfig {
    let mut cfg = RunConfig { sensors: SensorConfig::ideal(), ..RunConfig::default() };
    cfg.episode.initial = initial;
    cfg.service.fsync = false;
    cfg
}

async fn listener() -> TcpListener {
    TcpListener::bind("127.0.0.1:0").await.unwrap()
}

async fn start(cfg: &RunConfig, dir: Option<&std::path::Path>) -> Service {
    Service::start(cfg, None, listener().await, dir.map(|d| d.to_path_buf()), None).await.unwrap()
}

fn url(s: &Service, path: &str) -> String {
    format!("http://{}{}", s.addr, path)
}

async fn post(s: &Service, path: &str, body: Value) -> (u16, Value) {
    let r = reqwest::Client::new().post(url(s, path)).json(&body).send().await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

async fn get(s: &Service, path: &str) -> (u16, Value) {
    let r = reqwest::get(url(s, path)).await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

async fn decisions(s: &Service) -> Vec<DecisionPayload> {
    let (_, page) = get(s, "/api/history?kinds=decision&limit=100000").await;
    page["events"].as_array().unwrap().iter().map(|e| serde_json::from_value(e["payload"].clone()).unwrap()).collect()
}

/// Reads `n` events from the SSE endpoint, checking the frame format.
async fn read_stream(s: &Service, since: u64, n: usize) -> Vec<EventRecord> {
    let resp = reqwest::get(url(s, &format!("/api/stream?since_seq={since}"))).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.bytes_stream();
    let mut buf = String::new();
    let mut out = Vec::new();
    while out.len() < n {
        let chunk = tokio::time::timeout(Duration::from_secs(10), body.next()).await.expect("stream stalled");
        buf.push_str(std::str::from_utf8(&chunk.unwrap().unwrap()).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let frame: String = buf.drain(..end + 2).collect();
            if let Some(data) = frame.strip_prefix("data: ") {
                out.push(serde_json::from_str(data.trim_end()).unwrap());
            }
        }
    }
    out.truncate(n);
    out
}

#[tokio::test]
async fn override_applies_on_the_next_tick_and_expires_after_ttl() {
    let s = start(&config(FarmState { water_temp_c: 23.0, ..FarmState::default() }), None).await;
    s.handle.step(1).await.unwrap();
    let (code, _) = post(&s, "/api/override", json!({"device": "heater", "action": "off", "ttl_s": 120})).await;
    assert_eq!(code, 200);
    s.handle.step(3).await.unwrap();
    let d = decisions(&s).await;
    assert_eq!(d[0].decision.sources.heater, Source::Rule);
    assert!(d[0].decision.commands.heater_on);
    for k in [1, 2] {
        assert_eq!(d[k].decision.sources.heater, Source::Manual, "tick {k}");
        assert!(!d[k].decision.commands.heater_on);
    }
    assert_eq!(d[3].decision.sources.heater, Source::Rule);
    let (_, page) = get(&s, "/api/history?kinds=override").await;
    let changes: Vec<&str> = page["events"].as_array().unwrap().iter().map(|e| e["payload"]["change"].as_str().unwrap()).collect();
    assert_eq!(changes, vec!["off", "expired"]);
    s.shutdown().await;
}

#[tokio::test]
async fn release_hands_control_back_next_tick() {
    let s = start(&config(FarmState { water_temp_c: 23.0, ..FarmState::default() }), None).await;
    post(&s, "/api/override", json!({"device": "heater", "action": "off", "ttl_s": 3600})).await;
    s.handle.step(1).await.unwrap();
    post(&s, "/api/override", json!({"device": "heater", "action": "release"})).await;
    s.handle.step(1).await.unwrap();
    let d = decisions(&s).await;
    assert_eq!(d[0].decision.sources.heater, Source::Manual);
    assert_eq!(d[1].decision.sources.heater, Source::Rule);
    assert!(s.handle.state().await.unwrap().overrides.is_empty());
    for bad in [json!({"device": "toaster", "action": "on", "ttl_s": 5}), json!({"device": "heater", "action": "on", "ttl_s": 0})] {
        assert_eq!(post(&s, "/api/override", bad).await.0, 400);
    }
    s.shutdown().await;
}

#[tokio::test]
async fn setpoints_are_validated_and_used_next_tick() {
    let s = start(&config(FarmState::default()), None).await;
    s.handle.step(1).await.unwrap();
    let (code, body) = post(&s, "/api/setpoints", json!({"lower_temperature_threshold": 29})).await;
    assert_eq!(code, 400, "{body}");
    assert_eq!(post(&s, "/api/setpoints", json!({"bogus": 1})).await.0, 400);
    let (code, _) = post(&s, "/api/setpoints", json!({"lower_temperature_threshold": 22, "upper_temperature_threshold": 23})).await;
    assert_eq!(code, 200);
    s.handle.step(1).await.unwrap();
    let d = decisions(&s).await;
    assert_eq!(d[0].decision.temp_band, (25.0, 28.0));
    assert_eq!(d[1].decision.temp_band, (22.0, 23.0));
    // 24 °C is above the new band, so the cooler runs.
    assert!(d[1].decision.commands.cooler_on);
    let (_, hist) = get(&s, "/api/history?kinds=setpoint_change").await;
    assert_eq!(hist["events"].as_array().unwrap().len(), 1);
    assert_eq!(post(&s, "/api/mode", json!("ml_assist")).await.0, 409);
    assert_eq!(post(&s, "/api/mode", json!({"mode": "rule_only"})).await.0, 200);
    s.shutdown().await;
}

#[tokio::test]
async fn critical_alert_is_pinned_until_acknowledged() {
    let s = start(&config(FarmState { water_temp_c: 33.0, ..FarmState::default() }), None).await;
    s.handle.step(1).await.unwrap();
    let st = s.handle.state().await.unwrap();
    let crit = st.alerts.iter().find(|a| a.alert.code == AlertCode::CriticalTemp).expect("critical alert").clone();
    // Passive cooling brings 33 °C under the 32 °C limit within a few ticks.
    s.handle.step(20).await.unwrap();
    let st = s.handle.state().await.unwrap();
    assert!(st.frame.as_ref().unwrap().values.temp < 32.0);
    assert!(st.alerts.iter().any(|a| a.id == crit.id), "critical alert must persist");
    assert_eq!(post(&s, "/api/alerts/999/ack", json!(null)).await.0, 404);
    let (code, body) = post(&s, &format!("/api/alerts/{}/ack", crit.id), json!(null)).await;
    assert_eq!(code, 200, "{body}");
    assert!(!s.handle.state().await.unwrap().alerts.iter().any(|a| a.id == crit.id));
    let (_, hist) = get(&s, "/api/history?kinds=alert&limit=1000").await;
    let for_crit: Vec<&str> = hist["events"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["payload"]["alert"]["id"] == crit.id)
        .map(|e| e["payload"]["change"].as_str().unwrap())
        .collect();
    assert_eq!(for_crit, vec!["raised", "acknowledged", "cleared"]);
    s.shutdown().await;
}

#[tokio::test]
async fn stream_resumes_at_since_seq_without_gaps() {
    let s = start(&config(FarmState::default()), None).await;
    s.handle.step(5).await.unwrap();
    let first = read_stream(&s, 0, 7).await;
    let last = first.last().unwrap().seq;
    s.handle.step(5).await.unwrap();
    let total = s.reader.last_seq();
    let rest = read_stream(&s, last, (total - last) as usize).await;
    assert_eq!(rest[0].seq, last + 1);
    let joined: Vec<EventRecord> = first.into_iter().chain(rest).collect();
    assert_eq!(joined, s.reader.all());
    // Two subscribers see the same order.
    let (a, b) = tokio::join!(read_stream(&s, 0, total as usize), read_stream(&s, 0, total as usize));
    assert_eq!(a, b);
    s.shutdown().await;
}

#[tokio::test]
async fn live_events_reach_open_subscribers() {
    let s = start(&config(FarmState::default()), None).await;
    let reader = tokio::spawn({
        let addr = s.addr;
        async move {
            let mut sock = tokio::net::TcpStream::connect(addr).await.unwrap();
            sock.write_all(b"GET /api/stream?since_seq=0 HTTP/1.1\r\nHost: x\r\n\r\n").await.unwrap();
            let mut got = String::new();
            let mut buf = [0u8; 4096];
            while got.matches("data: ").count() < 2 {
                let n = sock.read(&mut buf).await.unwrap();
                got.push_str(std::str::from_utf8(&buf[..n]).unwrap());
            }
            got
        }
    });
    tokio::time::sleep(Duration::from_millis(100)).await;
    s.handle.step(1).await.unwrap();
    let raw = tokio::time::timeout(Duration::from_secs(10), reader).await.unwrap().unwrap();
    assert!(raw.contains("\r\n\r\n"));
    let body = &raw[raw.find("data: ").unwrap()..];
    // Chunked transfer framing sits between frames; each frame is a data line and a blank line.
    let frame = &body[..body.find("\n\n").unwrap() + 2];
    let ev: EventRecord = serde_json::from_str(frame.trim_start_matches("data: ").trim_end()).unwrap();
    assert_eq!((ev.seq, ev.kind), (1, EventKind::Reading));
    s.shutdown().await;
}

#[tokio::test]
async fn seq_is_gapless_across_kill_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(FarmState { water_level: 40.0, ..FarmState::default() });
    let s = start(&cfg, Some(dir.path())).await;
    s.handle.step(6).await.unwrap();
    post(&s, "/api/override", json!({"device": "motor", "action": "off", "ttl_s": 600})).await;
    let before = s.reader.last_seq();
    let level_before = s.handle.state().await.unwrap().frame.unwrap().values.level;
    s.kill();

    let s = start(&cfg, Some(dir.path())).await;
    let st = s.handle.state().await.unwrap();
    assert_eq!(st.last_seq, before);
    assert_eq!(st.tick, 6);
    assert_eq!(st.overrides.len(), 1, "override survives the restart");
    s.handle.step(4).await.unwrap();
    let d = decisions(&s).await;
    // Tick 6 starts from the state after tick 5's motor-on step, then the held-off motor lets it drain.
    assert!((d[6].state.water_level - (level_before + 4.0)).abs() < 1e-9);
    assert!(d[6..].iter().all(|p| p.decision.sources.motor == Source::Manual && !p.decision.commands.motor_on));
    assert!(d[6..].windows(2).all(|w| w[1].state.water_level < w[0].state.water_level));
    let all = s.reader.all();
    assert!(all.iter().map(|e| e.seq).eq(1..=all.len() as u64));
    s.kill();

    let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 2);
    let on_disk: Vec<EventRecord> = files.iter().flat_map(|f| read_event_file(f).unwrap()).collect();
    assert_eq!(on_disk, all);
    let ticks: Vec<u64> = on_disk
        .iter()
        .filter(|e| e.kind == EventKind::Decision)
        .map(|e| e.payload["tick"].as_u64().unwrap())
        .collect();
    assert!(ticks.iter().copied().eq(0..10));
}

struct FlakySink {
    fail: Arc<AtomicBool>,
    lines: Arc<std::sync::Mutex<Vec<Vec<u8>>>>,
}

impl Sink for FlakySink {
    fn append_line(&mut self, line: &[u8]) -> io::Result<()> {
        if self.fail.load(Ordering::SeqCst) {
            return Err(io::Error::new(io::ErrorKind::StorageFull, "disk full"));
        }
        self.lines.lock().unwrap().push(line.to_vec());
        Ok(())
    }
}

#[tokio::test]
async fn storage_failure_buffers_in_memory_and_raises_a_warning() {
    let fail = Arc::new(AtomicBool::new(false));
    let lines = Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = EventLog::with_sink(Box::new(FlakySink { fail: fail.clone(), lines: lines.clone() }), Vec::new());
    let s = Service::start_with_log(&config(FarmState::default()), None, listener().await, log, None).await.unwrap();
    s.handle.step(2).await.unwrap();
    fail.store(true, Ordering::SeqCst);
    s.handle.step(2).await.unwrap();
    let st = s.handle.state().await.unwrap();
    assert!(!st.storage_ok);
    assert!(st.alerts.iter().any(|a| a.alert.code == AlertCode::StorageFault));
    let (_, ack) = post(&s, "/api/override", json!({"device": "heater", "action": "off", "ttl_s": 60})).await;
    assert_eq!(ack["persisted"], false);
    // The loop kept running and publishing.
    assert_eq!(read_stream(&s, 0, s.reader.last_seq() as usize).await.len() as u64, s.reader.last_seq());
    fail.store(false, Ordering::SeqCst);
    s.handle.step(5).await.unwrap();
    let st = s.handle.state().await.unwrap();
    assert!(st.storage_ok);
    assert!(!st.alerts.iter().any(|a| a.alert.code == AlertCode::StorageFault), "warning lapses after recovery");
    let written: Vec<EventRecord> = lines.lock().unwrap().iter().map(|l| serde_json::from_slice(l).unwrap()).collect();
    assert_eq!(written, s.reader.all());
    s.shutdown().await;
}

#[tokio::test]
async fn replay_reproduces_the_recorded_stream() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(&config(FarmState { water_temp_c: 31.0, ..FarmState::default() }), Some(dir.path())).await;
    s.handle.step(3).await.unwrap();
    post(&s, "/api/override", json!({"device": "cooler", "action": "on", "ttl_s": 120})).await;
    s.handle.step(5).await.unwrap();
    let live = read_stream(&s, 0, s.reader.last_seq() as usize).await;
    s.shutdown().await;

    let file = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    let events: Vec<ReplayEvent> = read_event_file(&file).unwrap().into_iter().map(Into::into).collect();
    let (r, done) = Service::replay(EventLog::in_memory(), events, 0.0, listener().await).unwrap();
    assert_eq!(done.await.unwrap(), live.len() as u64);
    assert_eq!(read_stream(&r, 0, live.len()).await, live);
    let st = r.handle.state().await.unwrap();
    assert!(st.replay);
    assert_eq!(post(&r, "/api/override", json!({"device": "heater", "action": "off", "ttl_s": 60})).await.0, 409);
    r.shutdown().await;
}

#[tokio::test]
async fn paced_replay_of_an_episode_log() {
    let cfg = config(FarmState::default());
    let records = aquafarm_core::episode::simulate_run(&cfg, None, Default::default(), Default::default()).unwrap().remove(0);
    let events = episode_events(&records[..4]);
    assert_eq!(events.len(), 8);
    // 60 s of simulated time per tick at 600x is 0.1 s per tick.
    let started = std::time::Instant::now();
    let (r, done) = Service::replay(EventLog::in_memory(), events.clone(), 600.0, listener().await).unwrap();
    done.await.unwrap();
    assert!(started.elapsed() >= Duration::from_millis(250));
    let got: Vec<ReplayEvent> = r.reader.all().into_iter().map(Into::into).collect();
    assert_eq!(got, events);
    r.shutdown().await;
}

#[tokio::test]
async fn state_and_models_endpoints() {
    let s = start(&config(FarmState::default()), None).await;
    let (code, st) = get(&s, "/api/state").await;
    assert_eq!(code, 200);
    assert!(st["frame"].is_null());
    s.handle.step(1).await.unwrap();
    let (_, st) = get(&s, "/api/state").await;
    assert_eq!(st["tick"], 1);
    assert!(st["frame"]["values"]["temp"].is_number());
    assert_eq!(st["decision"]["commands"]["motor_on"], true);
    assert_eq!(get(&s, "/api/models").await.1, json!({"trained": false}));
    assert_eq!(get(&s, "/api/history?from=10&to=5").await.0, 400);
    assert_eq!(get(&s, "/api/history?kinds=nope").await.0, 400);
    let (_, page) = get(&s, "/api/history?limit=1").await;
    assert_eq!(page["events"][0]["seq"], 1);
    assert_eq!(page["next"], 1);
    s.shutdown().await;
}

#[tokio::test]
async fn timed_ticks_run_without_requests() {
    let s = Service::start(&config(FarmState::default()), None, listener().await, None, Some(Duration::from_millis(10)))
        .await
        .unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert!(s.handle.state().await.unwrap().tick >= 5);
    s.shutdown().await;
}
