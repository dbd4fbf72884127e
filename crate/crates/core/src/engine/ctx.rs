//! Shared control-loop state: request lifecycle, KV ledger, cost hooks.

use super::ledger::KvLedger;
use super::pipeline::{Booking, PipelineTables};
use super::{DecisionRecord, PhaseSpan, PolicyParams};
use crate::cost::{self, StageSpec};
use crate::metrics::{Phase, TraceEvent};
use crate::predictor::Predictor;
use crate::scheduler::PendingPrefill;
use crate::specs::{ClusterSpec, HardwareSpec, ModelSpec};
use crate::workload::RequestSet;
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ReqStatus {
    /// Waiting for (re-)prefill.
    Pending,
    /// KV resident, decoding or waiting for the next decode phase.
    Live,
    Done,
}

#[derive(Debug, Clone)]
pub(crate) struct ReqState {
    pub input_len: u32,
    pub true_output_len: u32,
    pub predicted_len: u32,
    /// Output tokens emitted so far (survives eviction).
    pub emitted: u32,
    pub status: ReqStatus,
    /// Admission order of the most recent prefill; drives the decode-entry
    /// split and most-recent-first eviction.
    pub admit_seq: u64,
}

impl ReqState {
    /// Tokens the next prefill must process: the prompt plus any
    /// previously emitted tokens whose KV was evicted.
    pub fn effective_input(&self) -> u64 {
        self.input_len as u64 + self.emitted as u64
    }

    /// Predicted decode steps left once the upcoming prefill emits its
    /// token.
    pub fn predicted_remaining_after_prefill(&self) -> u32 {
        self.predicted_len.saturating_sub(self.emitted + 1)
    }

    /// Predicted decode steps left for an already-live request.
    pub fn predicted_remaining_live(&self) -> u32 {
        self.predicted_len.saturating_sub(self.emitted)
    }
}

pub(crate) struct EngineCtx<'a> {
    pub params: &'a PolicyParams,
    pub stages: Vec<StageSpec>,
    pub device: HardwareSpec,
    /// All-reduce ranks per step (>1 only for tensor parallelism).
    pub tp_ranks: u32,
    pub num_layers: u32,
    pub hidden_bytes_per_token: u64,
    pub reqs: Vec<ReqState>,
    pub pending: VecDeque<PendingPrefill>,
    pub ledger: KvLedger,
    pub tables: PipelineTables,
    pub trace: Vec<TraceEvent>,
    pub phase_spans: Vec<PhaseSpan>,
    pub decisions: Vec<DecisionRecord>,
    pub first_decode_forecast: Vec<(u32, u64)>,
    pub decode_usage_by_step: Vec<u64>,
    pub max_decode_batch: u64,
    pub evictions: u64,
    /// KV tokens promised to in-flight or formed-but-unlanded prefills.
    pub reserved: u64,
    admit_counter: u64,
    next_batch_id: u64,
}

impl<'a> EngineCtx<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        workload: &RequestSet,
        model: &ModelSpec,
        cluster: &ClusterSpec,
        stages: Vec<StageSpec>,
        tp_ranks: u32,
        capacity_tokens: u64,
        params: &'a PolicyParams,
        predictor: &'a Predictor,
    ) -> Self {
        let reqs: Vec<ReqState> = workload
            .requests
            .iter()
            .map(|r| ReqState {
                input_len: r.input_len,
                true_output_len: r.true_output_len,
                predicted_len: predictor.predict(r).predicted_len,
                emitted: 0,
                status: ReqStatus::Pending,
                admit_seq: u64::MAX,
            })
            .collect();
        let pending = reqs
            .iter()
            .enumerate()
            .map(|(i, r)| PendingPrefill {
                id: i as u64,
                tokens: r.effective_input(),
                predicted_len: r.predicted_remaining_after_prefill(),
            })
            .collect();
        let num_stages = stages.len();
        EngineCtx {
            params,
            stages,
            device: cluster.device.clone(),
            tp_ranks,
            num_layers: model.num_layers,
            hidden_bytes_per_token: model.hidden_size as u64 * model.dtype_bytes as u64,
            reqs,
            pending,
            ledger: KvLedger::new(workload.len(), capacity_tokens),
            tables: PipelineTables::new(num_stages),
            trace: Vec::new(),
            phase_spans: Vec::new(),
            decisions: Vec::new(),
            first_decode_forecast: Vec::new(),
            decode_usage_by_step: Vec::new(),
            max_decode_batch: 0,
            evictions: 0,
            reserved: 0,
            admit_counter: 0,
            next_batch_id: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.ledger.capacity
    }

    pub fn next_batch_id(&mut self) -> u64 {
        let id = self.next_batch_id;
        self.next_batch_id += 1;
        id
    }

    pub fn live_indices(&self) -> Vec<usize> {
        let mut live: Vec<usize> = (0..self.reqs.len())
            .filter(|&i| self.reqs[i].status == ReqStatus::Live)
            .collect();
        live.sort_by_key(|&i| self.reqs[i].admit_seq);
        live
    }

    pub fn any_live(&self) -> bool {
        self.reqs.iter().any(|r| r.status == ReqStatus::Live)
    }

    /// Per-stage step durations in ns plus the inter-stage transfer and
    /// the total execution seconds (no queueing). Tensor-parallel steps
    /// fold two all-reduces per layer into the single executor's time.
    pub fn step_durations(&self, compute_tokens: u64, kv_read_tokens: u64) -> StepCost {
        let mut total_s = 0.0;
        let durs: Vec<u64> = self
            .stages
            .iter()
            .map(|stage| {
                let mut t = cost::stage_step_time(compute_tokens, kv_read_tokens, stage);
                if self.tp_ranks > 1 {
                    let bytes = compute_tokens * self.hidden_bytes_per_token;
                    t += 2.0
                        * self.num_layers as f64
                        * cost::allreduce_time(bytes, self.tp_ranks, &self.device);
                }
                total_s += t;
                secs_to_ns(t)
            })
            .collect();
        let transfer_ns = if self.stages.len() > 1 {
            let bytes = compute_tokens * self.hidden_bytes_per_token;
            let t = cost::p2p_time(bytes, &self.device);
            total_s += t * (self.stages.len() - 1) as f64;
            secs_to_ns(t)
        } else {
            0
        };
        StepCost { stage_durs_ns: durs, transfer_ns, exec_s: total_s }
    }

    /// Full single-batch prefill execution seconds (sum over stages plus
    /// transfers), used by the intensity dry-run.
    pub fn prefill_exec_seconds(&self, tokens: u64) -> f64 {
        self.step_durations(tokens, 0).exec_s
    }

    pub fn book(
        &mut self,
        ready_ns: u64,
        cost: &StepCost,
        batch_id: u64,
        phase: Phase,
    ) -> Booking {
        self.tables.book(
            ready_ns,
            &cost.stage_durs_ns,
            cost.transfer_ns,
            batch_id,
            phase,
            &mut self.trace,
        )
    }

    /// Land one prefilled request at `t`: allocate its KV, emit the first
    /// token, stamp the admission order. Requests whose output is a single
    /// token complete on the spot. Returns true if the request stays live.
    pub fn land_prefill(&mut self, req: usize, t: u64) -> bool {
        let tokens = self.reqs[req].effective_input();
        self.ledger.add(req, tokens);
        self.finalize_prefill(req, t)
    }

    /// Prefill bookkeeping without the KV allocation (chunked prefills
    /// allocate chunk by chunk). Returns true if the request stays live.
    pub fn finalize_prefill(&mut self, req: usize, t: u64) -> bool {
        let r = &mut self.reqs[req];
        r.emitted += 1;
        r.admit_seq = self.admit_counter;
        self.admit_counter += 1;
        if r.emitted >= r.true_output_len {
            r.status = ReqStatus::Done;
            self.ledger.release(req);
            self.ledger.record(t);
            false
        } else {
            r.status = ReqStatus::Live;
            self.ledger.record(t);
            true
        }
    }

    /// Apply one decode step's writes to `members` at `t`: each alive
    /// member gains a token; finished members free their KV at this
    /// instant. Returns the survivors, the finished count, and the sum of
    /// member footprints at the within-step peak (after writes, before
    /// frees).
    pub fn apply_decode_step(&mut self, members: &[usize], t: u64) -> DecodeStepEffect {
        let mut survivors = Vec::with_capacity(members.len());
        let mut finished = 0u32;
        let mut peak_contribution = 0u64;
        for &m in members {
            self.ledger.add(m, 1);
            let r = &mut self.reqs[m];
            r.emitted += 1;
            peak_contribution += self.ledger.tokens_of(m);
            if r.emitted >= r.true_output_len {
                r.status = ReqStatus::Done;
                finished += 1;
                self.ledger.release(m);
            } else {
                survivors.push(m);
            }
        }
        self.ledger.record(t);
        DecodeStepEffect { survivors, finished, peak_contribution }
    }

    /// Evict most-recently-admitted members back to the pending pool until
    /// the ledger fits capacity again. Never evicts the last live request.
    /// Returns the number evicted from `survivors`.
    pub fn evict_over_capacity(&mut self, survivors: &mut Vec<usize>, t: u64) -> u32 {
        let mut evicted = 0u32;
        while self.ledger.total > self.ledger.capacity && !survivors.is_empty() {
            if self.reqs.iter().filter(|r| r.status == ReqStatus::Live).count() <= 1 {
                break;
            }
            let (pos, &victim) = survivors
                .iter()
                .enumerate()
                .max_by_key(|(_, &m)| self.reqs[m].admit_seq)
                .expect("non-empty");
            survivors.remove(pos);
            self.ledger.release(victim);
            let r = &mut self.reqs[victim];
            r.status = ReqStatus::Pending;
            r.admit_seq = u64::MAX;
            self.pending.push_back(PendingPrefill {
                id: victim as u64,
                tokens: r.effective_input(),
                predicted_len: r.predicted_remaining_after_prefill(),
            });
            evicted += 1;
            self.evictions += 1;
        }
        if evicted > 0 {
            self.ledger.record(t);
        }
        evicted
    }

    pub fn log_decision(&mut self, t_ns: u64, kind: &str, detail: String) {
        self.decisions.push(DecisionRecord { t_ns, kind: kind.to_string(), detail });
    }
}

pub(crate) struct StepCost {
    pub stage_durs_ns: Vec<u64>,
    pub transfer_ns: u64,
    pub exec_s: f64,
}

pub(crate) struct DecodeStepEffect {
    pub survivors: Vec<usize>,
    pub finished: u32,
    pub peak_contribution: u64,
}

pub(crate) fn secs_to_ns(s: f64) -> u64 {
    (s * 1e9).round() as u64
}
