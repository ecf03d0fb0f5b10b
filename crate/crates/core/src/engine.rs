//! Deterministic discrete-event core: virtual clock, `(time, seq)` ordered
//! event queue and trace recording.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Simulated time in integer nanoseconds.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_us(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    /// Rounds to the nearest nanosecond.
    pub fn from_secs_f64(secs: f64) -> Self {
        SimTime((secs * 1e9).round().max(0.0) as u64)
    }

    pub const fn ns(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    JobRelease,
    EpochBoundary,
    RegulationBoundary,
    JobCompletion,
    ThrottleOn,
    ThrottleOff,
    FrameDrop,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::JobRelease => "JobRelease",
            EventKind::EpochBoundary => "EpochBoundary",
            EventKind::RegulationBoundary => "RegulationBoundary",
            EventKind::JobCompletion => "JobCompletion",
            EventKind::ThrottleOn => "ThrottleOn",
            EventKind::ThrottleOff => "ThrottleOff",
            EventKind::FrameDrop => "FrameDrop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "JobRelease" => EventKind::JobRelease,
            "EpochBoundary" => EventKind::EpochBoundary,
            "RegulationBoundary" => EventKind::RegulationBoundary,
            "JobCompletion" => EventKind::JobCompletion,
            "ThrottleOn" => EventKind::ThrottleOn,
            "ThrottleOff" => EventKind::ThrottleOff,
            "FrameDrop" => EventKind::FrameDrop,
            _ => return None,
        })
    }
}

/// Kind-specific identifiers carried by an event. `detail` is free-form
/// (latency in ns for completions, frame index for drops, ...).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventPayload {
    pub task: Option<u32>,
    pub core: Option<u16>,
    pub partition: Option<u16>,
    pub detail: u64,
}

impl EventPayload {
    pub fn task(task: usize) -> Self {
        EventPayload {
            task: Some(task as u32),
            ..Default::default()
        }
    }

    pub fn core(core: usize) -> Self {
        EventPayload {
            core: Some(core as u16),
            ..Default::default()
        }
    }

    pub fn with_core(mut self, core: usize) -> Self {
        self.core = Some(core as u16);
        self
    }

    pub fn with_partition(mut self, partition: usize) -> Self {
        self.partition = Some(partition as u16);
        self
    }

    pub fn with_detail(mut self, detail: u64) -> Self {
        self.detail = detail;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: EventPayload,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event at {event} scheduled in the past (clock {clock})")]
    PastEvent { event: SimTime, clock: SimTime },
    #[error("run_until({target}) is behind the clock ({clock})")]
    PastHorizon { target: SimTime, clock: SimTime },
}

#[derive(Debug, PartialEq, Eq)]
struct Queued(SimEvent);

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.0.time, self.0.seq).cmp(&(other.0.time, other.0.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// One processed event together with a digest of the scheduler state right
/// after it was handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub event: SimEvent,
    pub digest: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// Names used when rendering the `task` column.
    pub task_names: Vec<String>,
}

pub const TRACE_HEADER: &str = "time_ns,kind,task,core,partition,detail";

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn events(&self) -> impl Iterator<Item = &SimEvent> {
        self.records.iter().map(|r| &r.event)
    }

    fn task_label(&self, task: Option<u32>) -> String {
        match task {
            None => String::new(),
            Some(t) => self
                .task_names
                .get(t as usize)
                .cloned()
                .unwrap_or_else(|| t.to_string()),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.records {
            let e = &r.event;
            let opt = |v: Option<u16>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.time.0,
                e.kind.as_str(),
                self.task_label(e.payload.task),
                opt(e.payload.core),
                opt(e.payload.partition),
                e.payload.detail
            )?;
        }
        Ok(())
    }

    /// SHA-256 over the rendered records and state digests.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            let e = &r.event;
            h.update(e.time.0.to_le_bytes());
            h.update(e.seq.to_le_bytes());
            h.update(e.kind.as_str().as_bytes());
            h.update(e.payload.task.map_or(u32::MAX, |t| t).to_le_bytes());
            h.update(e.payload.core.map_or(u16::MAX, |c| c).to_le_bytes());
            h.update(e.payload.partition.map_or(u16::MAX, |p| p).to_le_bytes());
            h.update(e.payload.detail.to_le_bytes());
            h.update(r.digest.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Returns the index of the first record that breaks `(time, seq)` order.
    pub fn first_order_violation(&self) -> Option<usize> {
        self.records
            .windows(2)
            .position(|w| {
                let (a, b) = (&w[0].event, &w[1].event);
                (a.time, a.seq) >= (b.time, b.seq)
            })
            .map(|i| i + 1)
    }
}

/// The event queue and clock. Processing policy lives with the caller: the
/// simulator pops events, handles them and records them.
#[derive(Debug, Default)]
pub struct Engine {
    clock: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    trace: Trace,
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn schedule(
        &mut self,
        time: SimTime,
        kind: EventKind,
        payload: EventPayload,
    ) -> Result<EventId, EngineError> {
        if time < self.clock {
            return Err(EngineError::PastEvent {
                event: time,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(SimEvent {
            time,
            seq,
            kind,
            payload,
        })));
        Ok(EventId(seq))
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(Queued(e))| e.time)
    }

    /// Pops the next event if it fires at or before `limit`, moving the
    /// clock to its time.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<SimEvent> {
        match self.peek_time() {
            Some(t) if t <= limit => {
                let Reverse(Queued(e)) = self.queue.pop().expect("peeked");
                debug_assert!(e.time >= self.clock);
                self.clock = e.time;
                Some(e)
            }
            _ => None,
        }
    }

    pub fn record(&mut self, event: SimEvent, digest: u64) {
        self.trace.records.push(TraceRecord { event, digest });
    }

    /// Moves the clock forward without processing anything.
    pub fn advance_to(&mut self, t: SimTime) -> Result<(), EngineError> {
        if t < self.clock {
            return Err(EngineError::PastHorizon {
                target: t,
                clock: self.clock,
            });
        }
        self.clock = t;
        Ok(())
    }

    /// Processes every queued event with time `<= t_end` by recording it,
    /// then leaves the clock at `t_end`.
    pub fn run_until(&mut self, t_end: SimTime) -> Result<&Trace, EngineError> {
        if t_end < self.clock {
            return Err(EngineError::PastHorizon {
                target: t_end,
                clock: self.clock,
            });
        }
        while let Some(e) = self.pop_until(t_end) {
            self.record(e, 0);
        }
        self.clock = t_end;
        Ok(&self.trace)
    }
}
