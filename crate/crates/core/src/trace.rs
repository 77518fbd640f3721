//! Span recording, Trace Event Format export and per-operator aggregation.
//!
//! Only complete events (`"ph": "X"`) are produced. The output loads in Perfetto and
//! `chrome://tracing`.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Timeline row: one process id and one thread id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Track {
    pub pid: u32,
    pub tid: u32,
}

impl Track {
    pub const HOST: Track = Track { pid: 1, tid: 0 };

    /// Stream `n` of the profiled device.
    pub fn device(n: u32) -> Track {
        Track { pid: 1, tid: n + 1 }
    }
}

pub type Args = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub name: String,
    pub category: String,
    /// Microseconds from the trace epoch.
    pub ts_us: u64,
    pub dur_us: u64,
    pub track: Track,
    pub args: Option<Args>,
}

#[derive(Serialize, Deserialize)]
struct WireEvent {
    name: String,
    cat: String,
    ph: String,
    ts: u64,
    dur: u64,
    pid: u32,
    tid: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    args: Option<Args>,
}

#[derive(Serialize, Deserialize)]
struct WireTrace {
    #[serde(rename = "traceEvents")]
    trace_events: Vec<WireEvent>,
}

/// Append-only span log that any number of threads may write to.
#[derive(Debug, Clone, Default)]
pub struct SpanRecorder {
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl SpanRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_span(
        &self,
        name: &str,
        category: &str,
        ts_us: u64,
        dur_us: u64,
        track: Track,
        args: Option<Args>,
    ) {
        if name.is_empty() {
            return;
        }
        let dur_us = dur_us.min(u64::MAX - ts_us);
        self.events.lock().unwrap().push(TraceEvent {
            name: name.to_string(),
            category: category.to_string(),
            ts_us,
            dur_us,
            track,
            args,
        });
    }

    /// Same as [`SpanRecorder::record_span`] for nanosecond clock readings.
    pub fn record_span_ns(
        &self,
        name: &str,
        category: &str,
        start_ns: u64,
        dur_ns: u64,
        track: Track,
        args: Option<Args>,
    ) {
        let ts = start_ns / 1000;
        let end = (start_ns + dur_ns) / 1000;
        self.record_span(name, category, ts, end - ts, track, args);
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot of all spans, shifted so the earliest one starts at 0.
    pub fn finish(&self) -> Vec<TraceEvent> {
        let mut events = self.events.lock().unwrap().clone();
        if let Some(epoch) = events.iter().map(|e| e.ts_us).min() {
            for e in &mut events {
                e.ts_us -= epoch;
            }
        }
        events
    }
}

fn sorted(events: &[TraceEvent]) -> Vec<&TraceEvent> {
    let mut refs: Vec<&TraceEvent> = events.iter().collect();
    refs.sort_by_key(|e| e.ts_us);
    refs
}

/// Serialises events as a Trace Event Format object, sorted by start time.
pub fn trace_json(events: &[TraceEvent]) -> String {
    let wire = WireTrace {
        trace_events: sorted(events)
            .into_iter()
            .map(|e| WireEvent {
                name: e.name.clone(),
                cat: e.category.clone(),
                ph: "X".into(),
                ts: e.ts_us,
                dur: e.dur_us,
                pid: e.track.pid,
                tid: e.track.tid,
                args: e.args.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&wire).expect("trace events serialise")
}

pub fn export_trace_json(events: &[TraceEvent], destination: &Path) -> Result<()> {
    let file = File::create(destination).map_err(|e| Error::io(destination, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(trace_json(events).as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(destination, e))
}

/// Parses a Trace Event Format object. Events other than complete events are skipped.
pub fn parse_trace_json(text: &str) -> Result<Vec<TraceEvent>> {
    let doc: Value = serde_json::from_str(text)?;
    let list = doc
        .get("traceEvents")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema { field: "traceEvents".into() })?;
    let mut events = Vec::with_capacity(list.len());
    for item in list {
        if item.get("ph").and_then(Value::as_str) != Some("X") {
            continue;
        }
        let w: WireEvent = serde_json::from_value(item.clone())?;
        events.push(TraceEvent {
            name: w.name,
            category: w.cat,
            ts_us: w.ts,
            dur_us: w.dur,
            track: Track { pid: w.pid, tid: w.tid },
            args: w.args,
        });
    }
    Ok(events)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpAggregate {
    pub name: String,
    pub total_dur_us: u64,
    pub count: u64,
    pub mean_dur_us: f64,
    /// Fraction of the summed duration of all events.
    pub share_of_total: f64,
}

/// Groups events by name, ranks by total duration (ties by name) and keeps the first `top_k`.
pub fn aggregate_ops(events: &[TraceEvent], top_k: usize) -> Vec<OpAggregate> {
    let mut groups: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    let mut grand = 0u64;
    for e in events {
        let g = groups.entry(e.name.as_str()).or_default();
        g.0 += e.dur_us;
        g.1 += 1;
        grand += e.dur_us;
    }
    let mut out: Vec<OpAggregate> = groups
        .into_iter()
        .map(|(name, (total, count))| OpAggregate {
            name: name.to_string(),
            total_dur_us: total,
            count,
            mean_dur_us: total as f64 / count as f64,
            share_of_total: if grand > 0 { total as f64 / grand as f64 } else { 0.0 },
        })
        .collect();
    // stable sort keeps the BTreeMap's name order among equal totals
    out.sort_by_key(|a| Reverse(a.total_dur_us));
    out.truncate(top_k);
    out
}
