use std::io::{self, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    BwdStart,
    BwdEnd,
    BucketReady,
    CommStart,
    CommEnd,
    StepEnd,
}

/// One line of the JSON-lines event log. `ts` is seconds since the log was
/// created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub ts: f64,
    pub rank: usize,
    pub event: EventKind,
    pub bytes: u64,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<usize>,
}

/// Shared, clonable event sink with a common clock.
#[derive(Debug, Clone)]
pub struct EventLog {
    start: Instant,
    events: Arc<Mutex<Vec<Event>>>,
}

impl Default for EventLog {
    fn default() -> Self {
        EventLog::new()
    }
}

impl EventLog {
    pub fn new() -> EventLog {
        EventLog {
            start: Instant::now(),
            events: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn record(&self, rank: usize, event: EventKind, bytes: u64, step: usize, bucket: Option<usize>) {
        let ts = self.start.elapsed().as_secs_f64();
        self.events.lock().expect("event log poisoned").push(Event {
            ts,
            rank,
            event,
            bytes,
            step,
            bucket,
        });
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().expect("event log poisoned").clone()
    }

    pub fn for_rank(&self, rank: usize) -> Vec<Event> {
        self.events().into_iter().filter(|e| e.rank == rank).collect()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.lock().expect("event log poisoned").iter().filter(|e| e.event == kind).count()
    }

    pub fn write_jsonl(&self, mut w: impl Write, rank: Option<usize>) -> io::Result<()> {
        for e in self.events().iter().filter(|e| rank.is_none_or(|r| e.rank == r)) {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save_jsonl(&self, path: &Path, rank: Option<usize>) -> io::Result<()> {
        self.write_jsonl(io::BufWriter::new(std::fs::File::create(path)?), rank)
    }
}
