//! Deterministic discrete-event simulation of the pipeline.
//!
//! The engine mirrors a hierarchy-controller split: a control loop owns
//! all scheduling state (request status, KV ledger, policy state) and
//! hands timed work items to per-stage executors; executors are pure
//! timeline bookkeeping, one per stage plus one link per adjacent stage
//! pair. Simulated time is integer nanoseconds and event ties break on
//! (time, event kind, batch id), so runs are bit-reproducible.

mod ctx;
mod ledger;
mod pipeline;
mod slots;
mod tdpipe;

use crate::cost::{self, ProfileTable, StageSpec};
use crate::metrics::{Phase, TraceEvent};
use crate::predictor::Predictor;
use crate::scheduler::KvUsageMap;
use crate::specs::{partition_model, ClusterSpec, HardwareSpec, ModelSpec, SpecError};
use crate::workload::RequestSet;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

pub(crate) use ctx::EngineCtx;

/// Scheduling policy for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Temporally-disaggregated pipeline: long prefill-only and
    /// decode-only phases with forecast/intensity switching and work
    /// stealing.
    TdPipe,
    /// Pipeline parallelism with separate batching.
    PpSb,
    /// Pipeline parallelism with hybrid batching (chunked prefill).
    PpHb,
    /// Tensor parallelism with separate batching.
    TpSb,
    /// Tensor parallelism with hybrid batching.
    TpHb,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::TdPipe => "tdpipe",
            Policy::PpSb => "pp_sb",
            Policy::PpHb => "pp_hb",
            Policy::TpSb => "tp_sb",
            Policy::TpHb => "tp_hb",
        }
    }

    pub fn from_name(name: &str) -> Option<Policy> {
        match name {
            "tdpipe" => Some(Policy::TdPipe),
            "pp_sb" => Some(Policy::PpSb),
            "pp_hb" => Some(Policy::PpHb),
            "tp_sb" => Some(Policy::TpSb),
            "tp_hb" => Some(Policy::TpHb),
            _ => None,
        }
    }

    pub fn all() -> [Policy; 5] {
        [Policy::TdPipe, Policy::PpSb, Policy::PpHb, Policy::TpSb, Policy::TpHb]
    }

    fn is_tensor_parallel(&self) -> bool {
        matches!(self, Policy::TpSb | Policy::TpHb)
    }

    fn is_hybrid(&self) -> bool {
        matches!(self, Policy::PpHb | Policy::TpHb)
    }
}

/// How the prefill phase decides to hand over to decode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrefillSwitchMode {
    /// Forecast KV usage at future decode steps and switch when any
    /// sampled point exceeds capacity.
    Forecast,
    /// Switch once committed KV occupancy exceeds `ratio` of capacity.
    OccupancyRatio { ratio: f64 },
}

/// How the decode phase decides to hand back to prefill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeSwitchMode {
    /// Switch when spatial intensity drops strictly below temporal.
    Intensity,
    /// Switch once `ratio` of the phase's starting requests finished.
    FinishRatio { ratio: f64 },
}

/// Tunable policy parameters; defaults match the packaged scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyParams {
    /// Per-batch scheduled-token budget for prefill packing.
    pub token_budget: u64,
    /// Chunk size for hybrid batching.
    pub chunk_size: u32,
    /// Spacing between forecast sampling points (decode steps).
    pub future_point_spacing: u32,
    /// Largest forecast sampling point.
    pub future_point_horizon: u32,
    /// Batch-size grid for decode-rate profiling.
    pub profile_grid: Vec<u64>,
    /// Enable inter-batch work stealing during decode.
    pub steal: bool,
    pub prefill_switch: PrefillSwitchMode,
    pub decode_switch: DecodeSwitchMode,
    /// Fixed launch overhead per stage-step, seconds.
    pub overhead_s: f64,
    /// Include the quadratic attention FLOP correction in the cost model.
    pub attention_correction: bool,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            token_budget: 2048,
            chunk_size: 512,
            future_point_spacing: 32,
            future_point_horizon: 1024,
            profile_grid: cost::default_profile_grid(),
            steal: true,
            prefill_switch: PrefillSwitchMode::Forecast,
            decode_switch: DecodeSwitchMode::Intensity,
            overhead_s: cost::DEFAULT_OVERHEAD_S,
            attention_correction: false,
        }
    }
}

/// One phase interval of a temporally-disaggregated run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: Phase,
    pub start_ns: u64,
    pub end_ns: u64,
}

/// A logged scheduling decision, for audit output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub t_ns: u64,
    pub kind: String,
    pub detail: String,
}

/// Everything a run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub policy: Policy,
    pub num_devices: u32,
    pub model_name: String,
    pub hardware_name: String,
    pub num_requests: usize,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub makespan_ns: u64,
    /// (input + generated tokens) per second of makespan.
    pub throughput: f64,
    /// Share of stage-seconds spent idle over the whole run.
    pub bubble_ratio: f64,
    pub stage_busy_ns: Vec<u64>,
    pub phase_spans: Vec<PhaseSpan>,
    /// KV ledger change points: (time, total alive tokens).
    pub kv_points: Vec<(u64, u64)>,
    pub kv_capacity_tokens: u64,
    pub kv_peak_tokens: u64,
    pub max_decode_batch: u64,
    pub evictions: u64,
    pub events: Vec<TraceEvent>,
    /// Forecast snapshot at the first prefill-to-decode switch:
    /// (future point, forecast KV tokens).
    pub first_decode_forecast: Vec<(u32, u64)>,
    /// Measured KV tokens per decode-step index in the first decode phase
    /// (peak within the step, before completions free).
    pub decode_usage_by_step: Vec<u64>,
    pub decisions: Vec<DecisionRecord>,
}

impl RunResult {
    /// Fixed-format text summary; byte-identical for identical runs.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "policy={}", self.policy.name());
        let _ = writeln!(s, "devices={}", self.num_devices);
        let _ = writeln!(s, "model={}", self.model_name);
        let _ = writeln!(s, "hardware={}", self.hardware_name);
        let _ = writeln!(s, "requests={}", self.num_requests);
        let _ = writeln!(s, "tokens_in={}", self.tokens_in);
        let _ = writeln!(s, "tokens_out={}", self.tokens_out);
        let _ = writeln!(s, "makespan_ns={}", self.makespan_ns);
        let _ = writeln!(s, "throughput_tokens_per_s={:.6}", self.throughput);
        let _ = writeln!(s, "bubble_ratio={:.6}", self.bubble_ratio);
        let _ = writeln!(s, "kv_capacity_tokens={}", self.kv_capacity_tokens);
        let _ = writeln!(s, "kv_peak_tokens={}", self.kv_peak_tokens);
        let _ = writeln!(s, "max_decode_batch={}", self.max_decode_batch);
        let _ = writeln!(s, "evictions={}", self.evictions);
        let busy: Vec<String> = self.stage_busy_ns.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "stage_busy_ns={}", busy.join(","));
        let spans: Vec<String> = self
            .phase_spans
            .iter()
            .map(|p| {
                let tag = match p.phase {
                    Phase::Prefill => "P",
                    Phase::Decode => "D",
                };
                format!("{}[{}..{})", tag, p.start_ns, p.end_ns)
            })
            .collect();
        let _ = writeln!(s, "phases={}", spans.join(" "));
        s
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("workload is empty")]
    EmptyWorkload,
    #[error("chunk_size must be >= 1")]
    BadChunkSize,
    #[error(transparent)]
    Profile(#[from] crate::cost::ProfileError),
    #[error(
        "kv capacity exhausted: request needs {needed} tokens but only {capacity} fit in total"
    )]
    CapacityExhausted { needed: u64, capacity: u64 },
}

/// One chunk of a chunked prefill: `len` new tokens whose step must
/// re-read the `prior_tokens` already prefilled. Chunks are sequentially
/// dependent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillChunk {
    pub len: u64,
    pub prior_tokens: u64,
}

/// Split a prompt into `ceil(input_len / chunk_size)` chunks for hybrid
/// batching. Chunk `j` re-reads the `j * chunk_size` previously cached
/// tokens, which is the repeated-load penalty hybrid batching pays.
pub fn chunked_prefill_splitter(
    input_len: u64,
    chunk_size: u32,
) -> Result<Vec<PrefillChunk>, EngineError> {
    if chunk_size < 1 {
        return Err(EngineError::BadChunkSize);
    }
    let c = chunk_size as u64;
    let mut chunks = Vec::new();
    let mut done = 0u64;
    while done < input_len {
        let len = c.min(input_len - done);
        chunks.push(PrefillChunk { len, prior_tokens: done });
        done += len;
    }
    Ok(chunks)
}

/// Simulate one full run of `workload` under `policy`. Deterministic for
/// fixed inputs.
pub fn run(
    policy: Policy,
    workload: &RequestSet,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    params: &PolicyParams,
    predictor: &Predictor,
) -> Result<RunResult, EngineError> {
    if workload.is_empty() {
        return Err(EngineError::EmptyWorkload);
    }
    model.validate()?;
    cluster.device.validate()?;

    let (stages, tp_ranks) = build_stages(policy, model, cluster, params)?;
    let capacity_tokens = cluster.kv_capacity_tokens(model);

    // Feasibility: every request's full footprint must fit the ledger.
    let kv_per_tok = model.kv_bytes_per_token();
    debug_assert!(kv_per_tok > 0);
    for r in &workload.requests {
        let needed = r.input_len as u64 + r.true_output_len as u64;
        if needed > capacity_tokens {
            return Err(EngineError::CapacityExhausted { needed, capacity: capacity_tokens });
        }
    }

    let mut ctx = EngineCtx::new(
        workload,
        model,
        cluster,
        stages,
        tp_ranks,
        capacity_tokens,
        params,
        predictor,
    );

    let profile = build_profile(&ctx, workload, model, params)?;
    match policy {
        Policy::TdPipe => tdpipe::run_tdpipe(&mut ctx, &profile)?,
        _ => slots::run_slots(&mut ctx, policy.is_hybrid())?,
    }

    Ok(finish(policy, workload, model, cluster, capacity_tokens, ctx))
}

fn build_stages(
    policy: Policy,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    params: &PolicyParams,
) -> Result<(Vec<StageSpec>, u32), EngineError> {
    if policy.is_tensor_parallel() {
        // One logical executor with aggregated compute and bandwidth;
        // all-reduce delays are added per step by the cost hooks.
        let agg = HardwareSpec {
            flops_per_s: cluster.device.flops_per_s * cluster.num_devices as f64,
            mem_bw: cluster.device.mem_bw * cluster.num_devices as f64,
            mem_capacity: cluster.device.mem_capacity * cluster.num_devices as u64,
            ..cluster.device.clone()
        };
        let mut stage = StageSpec::new(model, agg, model.num_layers, params.overhead_s);
        stage.attention_correction = params.attention_correction;
        Ok((vec![stage], cluster.num_devices))
    } else {
        let counts = partition_model(model, cluster.num_devices)?;
        let stages = counts
            .iter()
            .map(|&layers| {
                let mut s =
                    StageSpec::new(model, cluster.device.clone(), layers, params.overhead_s);
                s.attention_correction = params.attention_correction;
                s
            })
            .collect();
        Ok((stages, 1))
    }
}

fn build_profile(
    ctx: &EngineCtx,
    workload: &RequestSet,
    model: &ModelSpec,
    params: &PolicyParams,
) -> Result<ProfileTable, EngineError> {
    // Offline decode-rate profile at a representative per-request KV
    // length: mean input plus half the mean output.
    let rep = (workload.mean_input_len() + workload.mean_output_len() / 2.0).round() as u64;
    Ok(cost::build_profile_table(
        &ctx.stages,
        model.hidden_size,
        model.dtype_bytes,
        &params.profile_grid,
        rep.max(1),
    )?)
}

fn finish(
    policy: Policy,
    workload: &RequestSet,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    capacity_tokens: u64,
    ctx: EngineCtx,
) -> RunResult {
    let makespan_ns = ctx.trace.iter().map(|e| e.start_ns + e.duration_ns).max().unwrap_or(0);
    let num_stages = ctx.stages.len();
    let mut stage_busy_ns = vec![0u64; num_stages];
    for e in &ctx.trace {
        if let crate::metrics::Resource::Stage(s) = e.resource {
            stage_busy_ns[s as usize] += e.duration_ns;
        }
    }
    let tokens_in = workload.total_input_tokens();
    let tokens_out: u64 = ctx.reqs.iter().map(|r| r.emitted as u64).sum();
    let busy_total: u64 = stage_busy_ns.iter().sum();
    let bubble_ratio = if makespan_ns == 0 {
        0.0
    } else {
        1.0 - busy_total as f64 / (num_stages as f64 * makespan_ns as f64)
    };
    let throughput = if makespan_ns == 0 {
        0.0
    } else {
        (tokens_in + tokens_out) as f64 * 1e9 / makespan_ns as f64
    };
    RunResult {
        policy,
        num_devices: cluster.num_devices,
        model_name: model.name.clone(),
        hardware_name: cluster.device.name.clone(),
        num_requests: workload.len(),
        tokens_in,
        tokens_out,
        makespan_ns,
        throughput,
        bubble_ratio,
        stage_busy_ns,
        phase_spans: ctx.phase_spans,
        kv_points: ctx.ledger.points,
        kv_capacity_tokens: capacity_tokens,
        kv_peak_tokens: ctx.ledger.peak,
        max_decode_batch: ctx.max_decode_batch,
        evictions: ctx.evictions,
        events: ctx.trace,
        first_decode_forecast: ctx.first_decode_forecast,
        decode_usage_by_step: ctx.decode_usage_by_step,
        decisions: ctx.decisions,
    }
}

pub(crate) fn forecast_snapshot(map: &KvUsageMap) -> Vec<(u32, u64)> {
    map.points().iter().copied().zip(map.usage().iter().copied()).collect()
}
