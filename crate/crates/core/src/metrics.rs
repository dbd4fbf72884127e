//! Trace capture, KV-usage timelines, bubble accounting, and comparison
//! tables.
//!
//! Traces export in the Chrome trace event format: one JSON document with
//! an array of `ph:"X"` duration events, microsecond timestamps, process
//! id = stage index, thread id = resource (0 compute, 1 outgoing link).
//! Exact nanosecond values ride along in `args`, so re-parsing a file
//! reproduces the engine's accounting bit-for-bit.

use crate::engine::{EngineError, Policy, PolicyParams, RunResult};
use crate::predictor::Predictor;
use crate::specs::{ClusterSpec, HardwareSpec, ModelSpec};
use crate::workload::RequestSet;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Phase a simulated event belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn tag(&self) -> &'static str {
        match self {
            Phase::Prefill => "P",
            Phase::Decode => "D",
        }
    }
}

/// The executor or link an event occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resource {
    Stage(u32),
    /// Link between stage `i` and stage `i + 1`.
    Link(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Compute,
    Transfer,
}

/// One timed execution on one resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub resource: Resource,
    pub batch_id: u64,
    pub kind: EventKind,
    pub start_ns: u64,
    pub duration_ns: u64,
    pub phase: Phase,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trace parse: {0}")]
    TraceParse(String),
    #[error("table parse at line {line}: {reason}")]
    TableParse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Serialize a run's events (plus phase-marker events) as a Chrome trace
/// document. Bit-stable for fixed input.
pub fn trace_to_json(run: &RunResult) -> String {
    let mut out = String::from("{\"traceEvents\":[\n");
    let mut first = true;
    let push = |line: String, out: &mut String, first: &mut bool| {
        if !*first {
            out.push_str(",\n");
        }
        out.push_str(&line);
        *first = false;
    };
    for e in &run.events {
        let (pid, tid, cat) = match (e.resource, e.kind) {
            (Resource::Stage(s), _) => (s, 0, "compute"),
            (Resource::Link(l), _) => (l, 1, "transfer"),
        };
        let name = match e.kind {
            EventKind::Compute => format!("batch-{}", e.batch_id),
            EventKind::Transfer => format!("xfer-{}", e.batch_id),
        };
        push(
            format!(
                "{{\"name\":\"{name}\",\"cat\":\"{cat}\",\"ph\":\"X\",\"ts\":{},\"dur\":{},\
                 \"pid\":{pid},\"tid\":{tid},\"args\":{{\"ns\":{},\"dur_ns\":{},\"batch\":{},\
                 \"phase\":\"{}\"}}}}",
                e.start_ns as f64 / 1000.0,
                e.duration_ns as f64 / 1000.0,
                e.start_ns,
                e.duration_ns,
                e.batch_id,
                e.phase.tag(),
            ),
            &mut out,
            &mut first,
        );
    }
    for (i, span) in run.phase_spans.iter().enumerate() {
        let name = match span.phase {
            Phase::Prefill => "prefill-phase",
            Phase::Decode => "decode-phase",
        };
        push(
            format!(
                "{{\"name\":\"{name}\",\"cat\":\"phase\",\"ph\":\"X\",\"ts\":{},\"dur\":{},\
                 \"pid\":0,\"tid\":2,\"args\":{{\"ns\":{},\"dur_ns\":{},\"index\":{i},\
                 \"phase\":\"{}\"}}}}",
                span.start_ns as f64 / 1000.0,
                (span.end_ns - span.start_ns) as f64 / 1000.0,
                span.start_ns,
                span.end_ns - span.start_ns,
                span.phase.tag(),
            ),
            &mut out,
            &mut first,
        );
    }
    out.push_str("\n]}\n");
    out
}

pub fn export_trace(run: &RunResult, path: &Path) -> Result<(), MetricsError> {
    std::fs::write(path, trace_to_json(run))?;
    Ok(())
}

/// Re-parse a Chrome trace document produced by [`trace_to_json`],
/// recovering exact nanosecond events from `args`.
pub fn parse_trace_json(text: &str) -> Result<Vec<TraceEvent>, MetricsError> {
    let doc: serde_json::Value =
        serde_json::from_str(text).map_err(|e| MetricsError::TraceParse(e.to_string()))?;
    let events = doc
        .get("traceEvents")
        .and_then(|v| v.as_array())
        .ok_or_else(|| MetricsError::TraceParse("missing traceEvents array".into()))?;
    let mut out = Vec::new();
    for ev in events {
        let cat = ev.get("cat").and_then(|c| c.as_str()).unwrap_or("");
        let kind = match cat {
            "compute" => EventKind::Compute,
            "transfer" => EventKind::Transfer,
            _ => continue, // phase markers and foreign events
        };
        let field = |name: &str| {
            ev.get("args")
                .and_then(|a| a.get(name))
                .and_then(|v| v.as_u64())
                .ok_or_else(|| MetricsError::TraceParse(format!("missing args.{name}")))
        };
        let pid = ev
            .get("pid")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| MetricsError::TraceParse("missing pid".into()))? as u32;
        let resource = match kind {
            EventKind::Compute => Resource::Stage(pid),
            EventKind::Transfer => Resource::Link(pid),
        };
        let phase = match ev
            .get("args")
            .and_then(|a| a.get("phase"))
            .and_then(|v| v.as_str())
        {
            Some("P") => Phase::Prefill,
            _ => Phase::Decode,
        };
        out.push(TraceEvent {
            resource,
            batch_id: field("batch")?,
            kind,
            start_ns: field("ns")?,
            duration_ns: field("dur_ns")?,
            phase,
        });
    }
    Ok(out)
}

/// Bubble ratio from raw events: idle stage-seconds over total
/// stage-seconds across the whole span of the trace.
pub fn bubble_ratio_from_events(events: &[TraceEvent], num_stages: usize) -> f64 {
    let makespan = events.iter().map(|e| e.start_ns + e.duration_ns).max().unwrap_or(0);
    if makespan == 0 {
        return 0.0;
    }
    let mut busy = vec![0u64; num_stages];
    for e in events {
        if let Resource::Stage(s) = e.resource {
            busy[s as usize] += e.duration_ns;
        }
    }
    1.0 - busy.iter().sum::<u64>() as f64 / (num_stages as f64 * makespan as f64)
}

/// One sample of the KV-usage timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelinePoint {
    pub t_ns: u64,
    /// Alive KV tokens over capacity; can exceed 1.0 only within the
    /// eviction transient.
    pub ratio: f64,
    /// Phase containing the sample; `None` for policies without phases.
    pub phase: Option<Phase>,
}

pub fn default_sample_interval(run: &RunResult) -> u64 {
    (run.makespan_ns / 1000).max(1)
}

/// Sample the ledger's change points at a fixed interval, annotating each
/// sample with the phase span containing it.
pub fn kv_timeline(run: &RunResult, sample_interval_ns: u64) -> Vec<TimelinePoint> {
    let interval = sample_interval_ns.max(1);
    let capacity = run.kv_capacity_tokens.max(1) as f64;
    let mut out = Vec::new();
    let mut t = 0u64;
    loop {
        let idx = run.kv_points.partition_point(|&(pt, _)| pt <= t);
        let tokens = if idx == 0 { 0 } else { run.kv_points[idx - 1].1 };
        let phase = run
            .phase_spans
            .iter()
            .find(|s| s.start_ns <= t && (t < s.end_ns || (t == s.end_ns && t == run.makespan_ns)))
            .map(|s| s.phase);
        out.push(TimelinePoint { t_ns: t, ratio: tokens as f64 / capacity, phase });
        if t >= run.makespan_ns {
            break;
        }
        t = (t + interval).min(run.makespan_ns);
    }
    out
}

/// Timeline as `time_ns,ratio,phase` rows.
pub fn timeline_to_csv(points: &[TimelinePoint]) -> String {
    let mut out = String::from("time_ns,ratio,phase\n");
    for p in points {
        let tag = p.phase.map(|ph| ph.tag()).unwrap_or("-");
        let _ = writeln!(out, "{},{:.6},{}", p.t_ns, p.ratio, tag);
    }
    out
}

/// Inputs shared by every cell of a comparison grid.
pub struct CompareScenario<'a> {
    pub workload: &'a RequestSet,
    pub model: &'a ModelSpec,
    pub hardware: &'a HardwareSpec,
    pub params: &'a PolicyParams,
    pub predictor: &'a Predictor,
    pub activation_reserve: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub policy: String,
    pub devices: u32,
    pub throughput: f64,
    pub bubble_ratio: f64,
    pub makespan_ns: u64,
    /// Throughput over the same policy's 1-device throughput (or the
    /// smallest device count in the grid when 1 is absent).
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<CompareRow>,
}

impl ComparisonTable {
    /// Lossless fixed formatting: integers exact, rates at 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,devices,throughput,bubble_ratio,makespan_ns,speedup\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{:.6}",
                r.policy, r.devices, r.throughput, r.bubble_ratio, r.makespan_ns, r.speedup
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut rows = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if idx == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let err = |reason: &str| MetricsError::TableParse {
                line: idx + 1,
                reason: reason.to_string(),
            };
            if fields.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            rows.push(CompareRow {
                policy: fields[0].to_string(),
                devices: fields[1].parse().map_err(|_| err("bad devices"))?,
                throughput: fields[2].parse().map_err(|_| err("bad throughput"))?,
                bubble_ratio: fields[3].parse().map_err(|_| err("bad bubble_ratio"))?,
                makespan_ns: fields[4].parse().map_err(|_| err("bad makespan"))?,
                speedup: fields[5].parse().map_err(|_| err("bad speedup"))?,
            });
        }
        Ok(ComparisonTable { rows })
    }

    pub fn row(&self, policy: &str, devices: u32) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.policy == policy && r.devices == devices)
    }
}

/// Run every policy at every device count over the identical workload and
/// tabulate throughput, bubble ratio, and speedup.
pub fn compare(
    policies: &[Policy],
    device_counts: &[u32],
    scenario: &CompareScenario,
) -> Result<ComparisonTable, MetricsError> {
    let mut cells: Vec<(Policy, u32, RunResult)> = Vec::new();
    for &policy in policies {
        for &devices in device_counts {
            let cluster = ClusterSpec::new(
                scenario.hardware.clone(),
                devices,
                scenario.model,
                scenario.activation_reserve,
            )
            .map_err(EngineError::from)?;
            let result = crate::engine::run(
                policy,
                scenario.workload,
                scenario.model,
                &cluster,
                scenario.params,
                scenario.predictor,
            )?;
            cells.push((policy, devices, result));
        }
    }
    let base_count = device_counts.iter().copied().min().unwrap_or(1);
    let mut rows: Vec<CompareRow> = cells
        .iter()
        .map(|(policy, devices, result)| {
            let base = cells
                .iter()
                .find(|(p, d, _)| p == policy && (*d == 1 || *d == base_count))
                .map(|(_, _, r)| r.throughput)
                .unwrap_or(result.throughput);
            CompareRow {
                policy: policy.name().to_string(),
                devices: *devices,
                throughput: result.throughput,
                bubble_ratio: result.bubble_ratio,
                makespan_ns: result.makespan_ns,
                speedup: result.throughput / base,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.policy.cmp(&b.policy).then(a.devices.cmp(&b.devices)));
    Ok(ComparisonTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_csv_round_trip_is_lossless() {
        let table = ComparisonTable {
            rows: vec![
                CompareRow {
                    policy: "tdpipe".into(),
                    devices: 4,
                    throughput: 12345.678901,
                    bubble_ratio: 0.123456,
                    makespan_ns: 987654321,
                    speedup: 3.210987,
                },
                CompareRow {
                    policy: "pp_sb".into(),
                    devices: 1,
                    throughput: 4000.5,
                    bubble_ratio: 0.0,
                    makespan_ns: 1,
                    speedup: 1.0,
                },
            ],
        };
        let csv = table.to_csv();
        let parsed = ComparisonTable::from_csv(&csv).unwrap();
        assert_eq!(parsed.to_csv(), csv);
    }

    #[test]
    fn empty_trace_is_valid_document() {
        let run = empty_run();
        let json = trace_to_json(&run);
        let events = parse_trace_json(&json).unwrap();
        assert!(events.is_empty());
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(doc["traceEvents"].as_array().unwrap().is_empty());
    }

    fn empty_run() -> RunResult {
        RunResult {
            policy: Policy::TdPipe,
            num_devices: 1,
            model_name: "m".into(),
            hardware_name: "h".into(),
            num_requests: 0,
            tokens_in: 0,
            tokens_out: 0,
            makespan_ns: 0,
            throughput: 0.0,
            bubble_ratio: 0.0,
            stage_busy_ns: vec![0],
            phase_spans: vec![],
            kv_points: vec![(0, 0)],
            kv_capacity_tokens: 100,
            kv_peak_tokens: 0,
            max_decode_batch: 0,
            evictions: 0,
            events: vec![],
            first_decode_forecast: vec![],
            decode_usage_by_step: vec![],
            decisions: vec![],
        }
    }

    #[test]
    fn timeline_samples_follow_change_points() {
        let mut run = empty_run();
        run.makespan_ns = 100;
        run.kv_points = vec![(0, 0), (10, 50), (60, 20), (100, 0)];
        let points = kv_timeline(&run, 10);
        assert_eq!(points.first().unwrap().ratio, 0.0);
        let at20 = points.iter().find(|p| p.t_ns == 20).unwrap();
        assert!((at20.ratio - 0.5).abs() < 1e-12);
        let at70 = points.iter().find(|p| p.t_ns == 70).unwrap();
        assert!((at70.ratio - 0.2).abs() < 1e-12);
        assert_eq!(points.last().unwrap().t_ns, 100);
        assert_eq!(points.last().unwrap().ratio, 0.0);
    }
}
