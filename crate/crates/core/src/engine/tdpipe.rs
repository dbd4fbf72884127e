//! The temporally-disaggregated control loop: alternating prefill-only
//! and decode-only phases.
//!
//! Prefill phases admit batches greedily while the forecast map says the
//! future KV footprint fits (launch precedes the check, so the triggering
//! batch still ships). Decode phases rotate one batch per pipeline stage;
//! each return applies completions, the work stealer, and the
//! spatial/temporal intensity rule.

use super::ctx::EngineCtx;
use super::{forecast_snapshot, DecodeSwitchMode, EngineError, PhaseSpan, PrefillSwitchMode};
use crate::cost::ProfileTable;
use crate::metrics::Phase;
use crate::scheduler::{
    check_switch, schedule_prefill, should_switch_to_prefill, spatial_intensity,
    temporal_intensity, update_usage, KvUsageMap, PhaseDecision, WorkStealer,
};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

pub(crate) fn run_tdpipe(ctx: &mut EngineCtx, profile: &ProfileTable) -> Result<(), EngineError> {
    let mut now = 0u64;
    let mut first_decode_recorded = false;
    loop {
        let mut progressed = false;
        if !ctx.pending.is_empty() {
            progressed |= run_prefill_phase(ctx, &mut now, !first_decode_recorded)?;
        }
        if ctx.any_live() {
            run_decode_phase(ctx, &mut now, profile, !first_decode_recorded);
            first_decode_recorded = true;
            progressed = true;
        }
        if ctx.pending.is_empty() && !ctx.any_live() {
            return Ok(());
        }
        if !progressed {
            return Err(EngineError::CapacityExhausted {
                needed: ctx.pending.front().map(|p| p.tokens).unwrap_or(0),
                capacity: ctx.capacity(),
            });
        }
    }
}

/// Rebuild the forecast from currently-live requests (reconciliation when
/// re-entering prefill; identical to a fresh map on the first phase).
fn rebuild_usage(ctx: &EngineCtx) -> KvUsageMap {
    let mut usage =
        KvUsageMap::new(ctx.params.future_point_spacing, ctx.params.future_point_horizon);
    for i in ctx.live_indices() {
        update_usage(ctx.ledger.tokens_of(i), ctx.reqs[i].predicted_remaining_live(), &mut usage);
    }
    usage
}

fn run_prefill_phase(
    ctx: &mut EngineCtx,
    now: &mut u64,
    capture_forecast: bool,
) -> Result<bool, EngineError> {
    let phase_start = *now;
    let capacity = ctx.capacity();
    let mut usage = rebuild_usage(ctx);
    let mut committed = ctx.ledger.total;
    let mut launched: Vec<(u64, Vec<usize>, u64)> = Vec::new();

    while !ctx.pending.is_empty() {
        if committed >= capacity {
            // The forecast only sees requests with predicted steps beyond
            // the first sampling point; this guard stops admission when
            // the ledger itself is full.
            ctx.log_decision(
                phase_start,
                "p2d",
                format!("guard switch: committed={committed} capacity={capacity}"),
            );
            break;
        }
        let (batch, forecast_decision) =
            schedule_prefill(&mut ctx.pending, &mut usage, capacity, ctx.params.token_budget);
        committed += batch.scheduled_tokens;
        let members: Vec<usize> = batch.ids.iter().map(|&id| id as usize).collect();
        let id = ctx.next_batch_id();
        launched.push((id, members, batch.scheduled_tokens));

        let decision = match ctx.params.prefill_switch {
            PrefillSwitchMode::Forecast => forecast_decision,
            PrefillSwitchMode::OccupancyRatio { ratio } => {
                if committed as f64 > ratio * capacity as f64 {
                    PhaseDecision::SwitchToDecode
                } else {
                    PhaseDecision::RemainPrefill
                }
            }
        };
        if decision == PhaseDecision::SwitchToDecode {
            ctx.log_decision(
                phase_start,
                "p2d",
                format!(
                    "switch: max_forecast={} committed={} capacity={}",
                    usage.max_usage(),
                    committed,
                    capacity
                ),
            );
            break;
        }
    }

    if launched.is_empty() {
        return Ok(false);
    }

    // Batches stream back-to-back: all are ready at phase start and the
    // stage tables serialize them in launch order.
    let mut landings: Vec<(u64, u64, Vec<usize>)> = Vec::new();
    for (id, members, tokens) in launched {
        let step = ctx.step_durations(tokens, 0);
        let booking = ctx.book(phase_start, &step, id, Phase::Prefill);
        landings.push((booking.exit_ns, id, members));
    }
    landings.sort_by_key(|&(exit, id, _)| (exit, id));

    let mut end = phase_start;
    for (exit, _, members) in landings {
        for m in members {
            ctx.land_prefill(m, exit);
        }
        // Launch-before-check overshoot lands here; claw back immediately.
        if ctx.ledger.total > capacity {
            let mut candidates = ctx.live_indices();
            ctx.evict_over_capacity(&mut candidates, exit);
        }
        end = end.max(exit);
    }
    *now = end;
    if capture_forecast {
        ctx.first_decode_forecast = forecast_snapshot(&usage);
    }
    ctx.phase_spans.push(PhaseSpan { phase: Phase::Prefill, start_ns: phase_start, end_ns: end });
    Ok(true)
}

struct DecodeBatch {
    members: Vec<usize>,
    step: u32,
    last_exec_s: f64,
}

const EV_RETURN: u8 = 0;
const EV_SUBMIT: u8 = 1;

fn run_decode_phase(ctx: &mut EngineCtx, now: &mut u64, profile: &ProfileTable, record: bool) {
    let phase_start = *now;
    let live = ctx.live_indices();
    let w = ctx.stages.len();

    // Equal split in admission order, remainder to earlier batches.
    let base = live.len() / w;
    let extra = live.len() % w;
    let mut batches: Vec<DecodeBatch> = Vec::with_capacity(w);
    let mut offset = 0;
    for b in 0..w {
        let size = base + usize::from(b < extra);
        batches.push(DecodeBatch {
            members: live[offset..offset + size].to_vec(),
            step: 0,
            last_exec_s: 0.0,
        });
        offset += size;
    }
    let sizes: Vec<u32> = batches.iter().map(|b| b.members.len() as u32).collect();
    let mut stealer = ctx.params.steal.then(|| WorkStealer::new(&sizes));
    let mut pool: VecDeque<usize> = VecDeque::new();
    let initial_live = live.len() as u64;
    let mut finished_in_phase = 0u64;

    let mut heap: BinaryHeap<Reverse<(u64, u8, u32)>> = BinaryHeap::new();
    let mut busy = vec![false; w];
    for b in 0..w {
        heap.push(Reverse((phase_start, EV_SUBMIT, b as u32)));
    }
    let mut switching = false;
    let mut phase_end = phase_start;

    while let Some(Reverse((t, kind, bi))) = heap.pop() {
        let b = bi as usize;
        phase_end = phase_end.max(t);
        if kind == EV_SUBMIT {
            if switching || batches[b].members.is_empty() {
                continue;
            }
            let size = batches[b].members.len() as u64;
            ctx.max_decode_batch = ctx.max_decode_batch.max(size);
            let kv_read: u64 =
                batches[b].members.iter().map(|&m| ctx.ledger.tokens_of(m)).sum();
            let step = ctx.step_durations(size, kv_read);
            batches[b].last_exec_s = step.exec_s;
            let id = ctx.next_batch_id();
            let booking = ctx.book(t, &step, id, Phase::Decode);
            busy[b] = true;
            heap.push(Reverse((booking.exit_ns, EV_RETURN, bi)));
            continue;
        }

        // Return: writes, completions, stealing, then the switch rule.
        busy[b] = false;
        let members = std::mem::take(&mut batches[b].members);
        let returned = members.len() as u32;
        batches[b].step += 1;
        let effect = ctx.apply_decode_step(&members, t);
        let mut survivors = effect.survivors;
        finished_in_phase += effect.finished as u64;
        if record {
            let idx = (batches[b].step - 1) as usize;
            if ctx.decode_usage_by_step.len() <= idx {
                ctx.decode_usage_by_step.resize(idx + 1, 0);
            }
            ctx.decode_usage_by_step[idx] += effect.peak_contribution;
        }
        let evicted = ctx.evict_over_capacity(&mut survivors, t);

        if let Some(st) = stealer.as_mut() {
            let out = st.on_batch_return(returned, effect.finished + evicted);
            if out.withheld > 0 {
                // Withhold the most recently admitted members.
                let cut = survivors.len() - out.withheld as usize;
                pool.extend(survivors.drain(cut..));
            }
            for _ in 0..out.refilled {
                survivors.push(pool.pop_front().expect("refill from non-empty pool"));
            }
            debug_assert_eq!(survivors.len(), out.submit as usize);
        }
        batches[b].members = survivors;

        if !switching {
            let decision = decode_switch_decision(
                ctx,
                profile,
                &batches,
                b,
                &pool,
                finished_in_phase,
                initial_live,
                t,
            );
            if decision == PhaseDecision::SwitchToPrefill {
                switching = true;
            }
        }
        if !switching && !batches[b].members.is_empty() {
            heap.push(Reverse((t, EV_SUBMIT, bi)));
        }
        if !switching {
            // A fully drained batch stops returning, so parked work would
            // strand; redistribute the pool into dead batches now.
            if let Some(st) = stealer.as_mut() {
                for dead in 0..w {
                    if pool.is_empty() {
                        break;
                    }
                    if batches[dead].members.is_empty() && !busy[dead] {
                        let out = st.on_batch_return(0, 0);
                        for _ in 0..out.refilled {
                            batches[dead]
                                .members
                                .push(pool.pop_front().expect("pool non-empty"));
                        }
                        if !batches[dead].members.is_empty() {
                            heap.push(Reverse((t, EV_SUBMIT, dead as u32)));
                        }
                    }
                }
            }
        }
    }

    *now = phase_end;
    ctx.phase_spans.push(PhaseSpan {
        phase: Phase::Decode,
        start_ns: phase_start,
        end_ns: phase_end,
    });
}

#[allow(clippy::too_many_arguments)]
fn decode_switch_decision(
    ctx: &mut EngineCtx,
    profile: &ProfileTable,
    batches: &[DecodeBatch],
    b: usize,
    pool: &VecDeque<usize>,
    finished_in_phase: u64,
    initial_live: u64,
    t: u64,
) -> PhaseDecision {
    if ctx.pending.is_empty() {
        // Nothing to prefill: decode continues unconditionally.
        return PhaseDecision::RemainDecode;
    }
    if ctx.ledger.total >= ctx.capacity() {
        // A prefill phase could not admit anything yet.
        return PhaseDecision::RemainDecode;
    }
    let all_empty = pool.is_empty() && batches.iter().all(|x| x.members.is_empty());
    if all_empty {
        ctx.log_decision(t, "d2p", "forced switch: all decode batches empty".into());
        return PhaseDecision::SwitchToPrefill;
    }
    match ctx.params.decode_switch {
        DecodeSwitchMode::Intensity => {
            let spatial = spatial_intensity(batches[b].members.len() as u64, profile);
            let pending_times = prospective_prefill_times(ctx);
            if pending_times.is_empty() {
                return PhaseDecision::RemainDecode;
            }
            let per_batch: f64 = batches
                .iter()
                .filter(|x| !x.members.is_empty())
                .map(|x| x.last_exec_s)
                .sum();
            let temporal = temporal_intensity(&pending_times, batches[b].last_exec_s, per_batch);
            let decision = should_switch_to_prefill(spatial, temporal);
            if decision == PhaseDecision::SwitchToPrefill {
                ctx.log_decision(
                    t,
                    "d2p",
                    format!("switch: spatial={spatial:.6} temporal={temporal:.6}"),
                );
            }
            decision
        }
        DecodeSwitchMode::FinishRatio { ratio } => {
            if finished_in_phase as f64 >= ratio * initial_live as f64 {
                ctx.log_decision(
                    t,
                    "d2p",
                    format!("switch: finished={finished_in_phase} of {initial_live}"),
                );
                PhaseDecision::SwitchToPrefill
            } else {
                PhaseDecision::RemainDecode
            }
        }
    }
}

/// Dry-run the next prefill phase over the pending queue: the batches
/// Algorithm-consistent admission would launch, as full single-batch
/// execution times. Feeds the temporal-intensity total.
fn prospective_prefill_times(ctx: &EngineCtx) -> Vec<f64> {
    let capacity = ctx.capacity();
    let mut usage = rebuild_usage(ctx);
    let mut committed = ctx.ledger.total;
    let mut times = Vec::new();
    let budget = ctx.params.token_budget;
    let mut i = 0;
    while i < ctx.pending.len() {
        if committed >= capacity {
            break;
        }
        let mut tokens = 0u64;
        let start = i;
        while i < ctx.pending.len() {
            let p = ctx.pending[i];
            if i > start && tokens + p.tokens > budget {
                break;
            }
            tokens += p.tokens;
            update_usage(p.tokens, p.predicted_len, &mut usage);
            i += 1;
            if tokens >= budget {
                break;
            }
        }
        committed += tokens;
        times.push(ctx.prefill_exec_seconds(tokens));
        if check_switch(&usage, capacity) == PhaseDecision::SwitchToDecode {
            break;
        }
    }
    times
}
