#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStderr, Command, Output, Stdio};

use serde_json::Value;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aquafarm"))
}

pub fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Runs the binary to completion with the given arguments.
pub fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("AQF_CONFIG").output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn write_config(dir: &Path, name: &str, body: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(body).unwrap()).unwrap();
    p
}

/// A running `serve` or `replay` child with its bound address.
pub struct Server {
    pub child: Child,
    pub addr: SocketAddr,
    pub stderr: BufReader<ChildStderr>,
}

impl Server {
    /// Spawns the binary and waits for its "listening on" / "replaying" line.
    pub fn spawn(args: &[&str]) -> Server {
        let mut child = bin()
            .args(args)
            .env_remove("AQF_CONFIG")
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .expect("binary spawns");
        let mut stderr = BufReader::new(child.stderr.take().unwrap());
        let mut line = String::new();
        loop {
            line.clear();
            if stderr.read_line(&mut line).unwrap() == 0 {
                let status = child.wait().unwrap();
                panic!("server exited early with {status}");
            }
            let Some(rest) = line.split(" on ").nth(1) else { continue };
            let addr: SocketAddr = rest.split_whitespace().next().unwrap().parse().unwrap();
            let addr = SocketAddr::from(([127, 0, 0, 1], addr.port()));
            return Server { child, addr, stderr };
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn signal(&self, sig: &str) {
        let ok = Command::new("kill").args([sig, &self.child.id().to_string()]).status().unwrap().success();
        assert!(ok, "kill {sig} failed");
    }

    /// Rest of stderr after the process exits.
    pub fn finish(mut self) -> (std::process::ExitStatus, String) {
        let status = self.child.wait().unwrap();
        let mut rest = String::new();
        for l in self.stderr.lines() {
            rest.push_str(&l.unwrap());
            rest.push('\n');
        }
        (status, rest)
    }
}

/// Serve configuration with noise-free sensors and a fast tick.
pub fn serve_config(tick_ms: u64, fsync: bool) -> Value {
    serde_json::json!({
        "seed": 5,
        "sensors": { "noise_sigma": { "level": 0.0, "temp": 0.0, "humidity": 0.0, "ph": 0.0, "behavior": 0.0 },
                     "dropout_prob": 0.0, "spike_prob": 0.0 },
        "service": { "tick_period_ms": tick_ms, "fsync": fsync }
    })
}

/// Blocking GET of a JSON body, for tests without a runtime of their own.
pub fn get_json(url: &str) -> Value {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async { reqwest::get(url).await.unwrap().json().await.unwrap() })
}

pub fn history(server: &Server) -> Vec<Value> {
    get_json(&server.url("/api/history?limit=1000000"))["events"].as_array().unwrap().clone()
}
