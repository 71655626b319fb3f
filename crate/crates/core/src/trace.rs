//! Run-level event trace: one line per event (timestamp, rank, kind, key),
//! used by the ordering test harness and exportable from benchmark runs.

use std::sync::Mutex;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Pop,
    ComputeStart,
    ComputeEnd,
    Send,
    Recv,
    Deliver,
    Fail,
}

impl TraceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceKind::Pop => "pop",
            TraceKind::ComputeStart => "compute_start",
            TraceKind::ComputeEnd => "compute_end",
            TraceKind::Send => "send",
            TraceKind::Recv => "recv",
            TraceKind::Deliver => "deliver",
            TraceKind::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    /// Seconds since the trace was created.
    pub at: f64,
    pub rank: usize,
    pub kind: TraceKind,
    pub key: u64,
}

pub struct TraceLog {
    start: Instant,
    events: Mutex<Vec<TraceEvent>>,
}

impl Default for TraceLog {
    fn default() -> Self {
        TraceLog {
            start: Instant::now(),
            events: Mutex::new(Vec::new()),
        }
    }
}

impl TraceLog {
    pub fn record(&self, rank: usize, kind: TraceKind, key: u64) {
        let at = self.start.elapsed().as_secs_f64();
        self.events.lock().unwrap().push(TraceEvent {
            at,
            rank,
            kind,
            key,
        });
    }

    pub fn snapshot(&self) -> Vec<TraceEvent> {
        self.events.lock().unwrap().clone()
    }

    /// `timestamp rank kind key` lines in record order.
    pub fn lines(&self) -> Vec<String> {
        self.snapshot()
            .iter()
            .map(|e| format!("{:.9} {} {} {}", e.at, e.rank, e.kind.as_str(), e.key))
            .collect()
    }

    /// Keys in the order one rank popped them, for ordering assertions.
    pub fn popped_keys(&self, rank: usize) -> Vec<u64> {
        self.snapshot()
            .iter()
            .filter(|e| e.rank == rank && e.kind == TraceKind::Pop)
            .map(|e| e.key)
            .collect()
    }
}
