//! Append-only event log with gapless sequence numbers.
//!
//! Each service session writes its own `events-NNNNNN.jsonl` under the data
//! directory, and sequence numbers continue across sessions. An event is
//! written (and fsynced when configured) before it is published to readers.
//! When the sink fails the event is kept in a pending buffer, published anyway,
//! and written ahead of the next event once the sink recovers.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use futures::Stream;
use serde_json::Value;
use tokio::sync::broadcast;

use crate::event::{EventKind, EventRecord};

const BROADCAST_CAPACITY: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{file}: line {line}: {reason}")]
    Corrupt { file: PathBuf, line: usize, reason: String },
}

/// Where serialized lines go. Implemented for files and for test doubles.
pub trait Sink: Send {
    fn append_line(&mut self, line: &[u8]) -> io::Result<()>;
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub struct FileSink {
    file: File,
    fsync: bool,
}

impl FileSink {
    pub fn create(path: &Path, fsync: bool) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FileSink { file, fsync })
    }
}

impl Sink for FileSink {
    fn append_line(&mut self, line: &[u8]) -> io::Result<()> {
        let len = self.file.seek(SeekFrom::End(0))?;
        let res = self.file.write_all(line).and_then(|_| if self.fsync { self.file.sync_data() } else { Ok(()) });
        if res.is_err() {
            // Drop any partial line so the file stays parseable.
            let _ = self.file.set_len(len);
        }
        res
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.sync_all()
    }
}

/// Keeps nothing; used for logs that live only in memory.
pub struct NullSink;

impl Sink for NullSink {
    fn append_line(&mut self, _: &[u8]) -> io::Result<()> {
        Ok(())
    }
}

struct Shared {
    history: RwLock<Vec<EventRecord>>,
    tx: broadcast::Sender<EventRecord>,
}

/// Returned when an event could not be written; it is still buffered and published.
#[derive(Debug, thiserror::Error)]
#[error("event {} kept in memory: {error}", record.seq)]
pub struct StorageFault {
    pub record: EventRecord,
    pub error: io::Error,
}

/// The single writer. Readers get an [`EventReader`].
pub struct EventLog {
    sink: Box<dyn Sink>,
    next_seq: u64,
    pending: VecDeque<Vec<u8>>,
    session: u64,
    path: Option<PathBuf>,
    shared: Arc<Shared>,
}

impl EventLog {
    /// Opens `dir`, recovers every earlier session and starts a new session file.
    pub fn open(dir: &Path, fsync: bool) -> Result<Self, LogError> {
        fs::create_dir_all(dir)?;
        let files = session_files(dir)?;
        let mut history = Vec::new();
        for (i, path) in files.iter().enumerate() {
            let last = i + 1 == files.len();
            history.extend(read_session(path, last, history.last().map(|r: &EventRecord| r.seq))?);
        }
        let session = files.len() as u64 + 1;
        let path = dir.join(format!("events-{session:06}.jsonl"));
        let sink = FileSink::create(&path, fsync)?;
        let mut log = Self::with_sink(Box::new(sink), history);
        log.session = session;
        log.path = Some(path);
        Ok(log)
    }

    pub fn in_memory() -> Self {
        Self::with_sink(Box::new(NullSink), Vec::new())
    }

    /// A log over any sink, continuing after `history`.
    pub fn with_sink(sink: Box<dyn Sink>, history: Vec<EventRecord>) -> Self {
        let (tx, _) = broadcast::channel(BROADCAST_CAPACITY);
        let next_seq = history.last().map_or(1, |r| r.seq + 1);
        EventLog {
            sink,
            next_seq,
            pending: VecDeque::new(),
            session: 1,
            path: None,
            shared: Arc::new(Shared { history: RwLock::new(history), tx }),
        }
    }

    pub fn reader(&self) -> EventReader {
        EventReader { shared: self.shared.clone() }
    }

    /// 1-based index of the current session.
    pub fn session(&self) -> u64 {
        self.session
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    /// Events not yet written to the sink.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn append(&mut self, kind: EventKind, timestamp_s: f64, payload: Value) -> Result<EventRecord, StorageFault> {
        let record = EventRecord { seq: self.next_seq, kind, timestamp_s, payload };
        self.next_seq += 1;
        let mut line = serde_json::to_vec(&record).expect("event serializes");
        line.push(b'\n');
        self.pending.push_back(line);
        let res = self.drain();
        self.shared.history.write().expect("history lock").push(record.clone());
        // No receivers is not an error.
        let _ = self.shared.tx.send(record.clone());
        match res {
            Ok(()) => Ok(record),
            Err(error) => Err(StorageFault { record, error }),
        }
    }

    /// Retries buffered events, oldest first.
    pub fn drain(&mut self) -> io::Result<()> {
        while let Some(line) = self.pending.front() {
            self.sink.append_line(line)?;
            self.pending.pop_front();
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.drain()?;
        self.sink.flush()
    }
}

/// Read access shared by API handlers and subscribers.
#[derive(Clone)]
pub struct EventReader {
    shared: Arc<Shared>,
}

/// Filter for [`EventReader::query`]. Bounds are inclusive and in simulated seconds.
#[derive(Debug, Clone, Default)]
pub struct HistoryQuery {
    pub from: Option<f64>,
    pub to: Option<f64>,
    pub kinds: Option<Vec<EventKind>>,
    pub limit: usize,
    /// Continuation token: only events with a larger seq are returned.
    pub after_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HistoryPage {
    pub events: Vec<EventRecord>,
    /// Pass back as `after_seq` to fetch the next page.
    pub next: Option<u64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QueryError {
    #[error("invalid range: from {from} is after to {to}")]
    InvalidRange { from: f64, to: f64 },
    #[error("limit must be at least 1")]
    ZeroLimit,
}

impl EventReader {
    pub fn last_seq(&self) -> u64 {
        self.shared.history.read().expect("history lock").last().map_or(0, |r| r.seq)
    }

    pub fn all(&self) -> Vec<EventRecord> {
        self.shared.history.read().expect("history lock").clone()
    }

    pub fn after(&self, seq: u64) -> Vec<EventRecord> {
        let h = self.shared.history.read().expect("history lock");
        let start = h.partition_point(|r| r.seq <= seq);
        h[start..].to_vec()
    }

    pub fn query(&self, q: &HistoryQuery) -> Result<HistoryPage, QueryError> {
        if let (Some(from), Some(to)) = (q.from, q.to) {
            if from > to {
                return Err(QueryError::InvalidRange { from, to });
            }
        }
        if q.limit == 0 {
            return Err(QueryError::ZeroLimit);
        }
        let h = self.shared.history.read().expect("history lock");
        let start = h.partition_point(|r| r.seq <= q.after_seq.unwrap_or(0));
        let mut hits = h[start..].iter().filter(|r| {
            q.from.is_none_or(|f| r.timestamp_s >= f)
                && q.to.is_none_or(|t| r.timestamp_s <= t)
                && q.kinds.as_ref().is_none_or(|k| k.contains(&r.kind))
        });
        let events: Vec<EventRecord> = hits.by_ref().take(q.limit).cloned().collect();
        let next = match (events.last(), hits.next()) {
            (Some(last), Some(_)) => Some(last.seq),
            _ => None,
        };
        Ok(HistoryPage { events, next })
    }

    /// Every event with seq > `since_seq` in order, then live events as they are appended.
    pub fn subscribe(&self, since_seq: u64) -> impl Stream<Item = EventRecord> + Send + 'static {
        // Subscribe before taking the backlog so nothing falls between the two.
        let rx = self.shared.tx.subscribe();
        let backlog: VecDeque<EventRecord> = self.after(since_seq).into();
        let state = (self.clone(), rx, backlog, since_seq);
        futures::stream::unfold(state, |(reader, mut rx, mut backlog, mut last)| async move {
            loop {
                if let Some(r) = backlog.pop_front() {
                    if r.seq > last {
                        last = r.seq;
                        return Some((r, (reader, rx, backlog, last)));
                    }
                    continue;
                }
                match rx.recv().await {
                    Ok(r) if r.seq == last + 1 => {
                        last = r.seq;
                        return Some((r, (reader, rx, backlog, last)));
                    }
                    Ok(r) if r.seq <= last => continue,
                    // A gap or a lagged receiver is refilled from history.
                    Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => backlog = reader.after(last).into(),
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        })
    }
}

fn session_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("events-") && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads one session file. In the newest file a torn final line is truncated away:
/// it was never acknowledged, because acknowledgment follows the write.
fn read_session(path: &Path, newest: bool, prev_seq: Option<u64>) -> Result<Vec<EventRecord>, LogError> {
    let corrupt = |line: usize, reason: String| LogError::Corrupt { file: path.to_path_buf(), line, reason };
    let mut reader = BufReader::new(File::open(path)?);
    let mut out: Vec<EventRecord> = Vec::new();
    let mut good_len = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        match serde_json::from_str::<EventRecord>(buf.trim_end()) {
            Ok(r) if complete => {
                let expected = out.last().map(|p| p.seq).or(prev_seq).map_or(r.seq, |s| s + 1);
                if r.seq != expected {
                    return Err(corrupt(line_no, format!("seq {} follows {}", r.seq, expected - 1)));
                }
                out.push(r);
                good_len += n as u64;
            }
            _ if newest && (!complete || reader.fill_buf()?.is_empty()) => {
                OpenOptions::new().write(true).open(path)?.set_len(good_len)?;
                break;
            }
            Ok(_) => return Err(corrupt(line_no, "missing newline".into())),
            Err(e) => return Err(corrupt(line_no, e.to_string())),
        }
    }
    Ok(out)
}

/// Reads a log file written by [`EventLog`] without modifying it.
pub fn read_event_file(path: &Path) -> Result<Vec<EventRecord>, LogError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(line)
            .map_err(|e| LogError::Corrupt { file: path.to_path_buf(), line: i + 1, reason: e.to_string() })?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use futures::StreamExt;
    use serde_json::json;

    #[test]
    fn seq_starts_at_one_and_increments() {
        let mut log = EventLog::in_memory();
        assert_eq!(log.append(EventKind::Reading, 0.0, json!({})).unwrap().seq, 1);
        assert_eq!(log.append(EventKind::Decision, 0.0, json!({})).unwrap().seq, 2);
    }

    #[test]
    fn sessions_continue_the_sequence() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = EventLog::open(dir.path(), false).unwrap();
            for i in 0..3 {
                log.append(EventKind::Reading, i as f64, json!({"i": i})).unwrap();
            }
        }
        let mut log = EventLog::open(dir.path(), false).unwrap();
        assert_eq!(log.session(), 2);
        assert_eq!(log.append(EventKind::Reading, 3.0, json!({})).unwrap().seq, 4);
        let seqs: Vec<u64> = log.reader().all().iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4]);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = {
            let mut log = EventLog::open(dir.path(), false).unwrap();
            log.append(EventKind::Reading, 0.0, json!({})).unwrap();
            log.path().unwrap().to_path_buf()
        };
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"seq":2,"kind":"rea"#).unwrap();
        let log = EventLog::open(dir.path(), false).unwrap();
        assert_eq!(log.last_seq(), 1);
        assert_eq!(read_event_file(&path).unwrap().len(), 1);
    }

    #[test]
    fn corrupt_middle_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events-000001.jsonl");
        fs::write(&path, "{\"seq\":1,\"kind\":\"reading\",\"timestamp_s\":0,\"payload\":{}}\nnot json\n{}\n").unwrap();
        match EventLog::open(dir.path(), false) {
            Err(LogError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn history_pages_with_token() {
        let mut log = EventLog::in_memory();
        for i in 0..3 {
            log.append(EventKind::Reading, i as f64 * 60.0, json!({})).unwrap();
        }
        let r = log.reader();
        let q = HistoryQuery { limit: 1, ..Default::default() };
        let p = r.query(&q).unwrap();
        assert_eq!((p.events.len(), p.events[0].seq, p.next), (1, 1, Some(1)));
        let p = r.query(&HistoryQuery { after_seq: p.next, limit: 5, ..Default::default() }).unwrap();
        assert_eq!(p.events.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(p.next, None);
        let one = r.query(&HistoryQuery { from: Some(60.0), to: Some(60.0), limit: 10, ..Default::default() }).unwrap();
        assert_eq!(one.events.len(), 1);
        let none = r.query(&HistoryQuery { from: Some(10.0), to: Some(20.0), limit: 10, ..Default::default() }).unwrap();
        assert!(none.events.is_empty());
        assert!(r.query(&HistoryQuery { from: Some(2.0), to: Some(1.0), limit: 1, ..Default::default() }).is_err());
    }

    #[tokio::test]
    async fn subscribers_resume_after_since_seq() {
        let mut log = EventLog::in_memory();
        for _ in 0..5 {
            log.append(EventKind::Reading, 0.0, json!({})).unwrap();
        }
        let a = log.reader().subscribe(2);
        let b = log.reader().subscribe(0);
        for _ in 0..3 {
            log.append(EventKind::Decision, 0.0, json!({})).unwrap();
        }
        let a: Vec<u64> = a.take(6).map(|r| r.seq).collect().await;
        let b: Vec<u64> = b.take(8).map(|r| r.seq).collect().await;
        assert_eq!(a, (3..=8).collect::<Vec<_>>());
        assert_eq!(b, (1..=8).collect::<Vec<_>>());
    }

    #[tokio::test]
    async fn lagging_subscriber_refills_from_history() {
        let mut log = EventLog::in_memory();
        let s = log.reader().subscribe(0);
        for _ in 0..(BROADCAST_CAPACITY + 100) {
            log.append(EventKind::Reading, 0.0, json!({})).unwrap();
        }
        let got: Vec<u64> = s.take(BROADCAST_CAPACITY + 100).map(|r| r.seq).collect().await;
        assert!(got.iter().copied().eq(1..=(BROADCAST_CAPACITY as u64 + 100)));
    }
}
