//! Baseline policies: virtual-engine slots with separate or hybrid
//! batching.
//!
//! One slot per pipeline stage (one total for tensor parallelism) holds a
//! running decode set and keeps at most one step in flight, mirroring how
//! serving frameworks drive pipeline parallelism with per-micro-batch
//! virtual engines. With separate batching a slot alternates one prefill
//! batch and one decode step whenever both kinds of work are available;
//! with hybrid batching every step mixes the decode set with prefill
//! chunks under the token budget.

use super::ctx::EngineCtx;
use super::EngineError;
use crate::metrics::Phase;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

#[derive(Debug, Clone, Copy)]
struct ChunkProgress {
    req: usize,
    /// Tokens of the effective input already prefilled.
    done: u64,
}

#[derive(Debug)]
enum Step {
    Prefill { members: Vec<usize>, tokens: u64 },
    Decode { members: Vec<usize> },
    Hybrid { members: Vec<usize>, chunks: Vec<(usize, u64)> },
}

#[derive(Debug, Default)]
struct Slot {
    decode_members: Vec<usize>,
    active_prefills: VecDeque<ChunkProgress>,
    last_was_prefill: bool,
}

pub(crate) fn run_slots(ctx: &mut EngineCtx, hybrid: bool) -> Result<(), EngineError> {
    let w = ctx.stages.len();
    let mut slots: Vec<Slot> = (0..w).map(|_| Slot::default()).collect();
    let mut in_flight: Vec<Option<Step>> = (0..w).map(|_| None).collect();
    let mut heap: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();

    for s in 0..w {
        try_form(ctx, &mut slots, &mut in_flight, &mut heap, s, 0, hybrid);
    }

    while let Some(Reverse((t, si))) = heap.pop() {
        let s = si as usize;
        let step = in_flight[s].take().expect("return without in-flight step");
        process_return(ctx, &mut slots, s, step, t);
        for idle in 0..w {
            try_form(ctx, &mut slots, &mut in_flight, &mut heap, idle, t, hybrid);
        }
    }

    let unfinished = !ctx.pending.is_empty()
        || ctx.any_live()
        || slots.iter().any(|s| !s.active_prefills.is_empty());
    if unfinished {
        return Err(EngineError::CapacityExhausted {
            needed: ctx.pending.front().map(|p| p.tokens).unwrap_or(0),
            capacity: ctx.capacity(),
        });
    }
    Ok(())
}

fn process_return(ctx: &mut EngineCtx, slots: &mut [Slot], s: usize, step: Step, t: u64) {
    match step {
        Step::Prefill { members, tokens } => {
            ctx.reserved -= tokens;
            for m in members {
                if ctx.land_prefill(m, t) {
                    slots[s].decode_members.push(m);
                }
            }
            reclaim(ctx, slots, s, t);
        }
        Step::Decode { members } => {
            let effect = ctx.apply_decode_step(&members, t);
            slots[s].decode_members = effect.survivors;
            reclaim(ctx, slots, s, t);
        }
        Step::Hybrid { members, chunks } => {
            let effect = ctx.apply_decode_step(&members, t);
            slots[s].decode_members = effect.survivors;
            for (req, chunk) in chunks {
                ctx.ledger.add(req, chunk);
                ctx.reserved -= chunk;
                let cp = slots[s]
                    .active_prefills
                    .iter_mut()
                    .find(|c| c.req == req)
                    .expect("chunk for tracked prefill");
                cp.done += chunk;
                if cp.done == ctx.reqs[req].effective_input() {
                    slots[s].active_prefills.retain(|c| c.req != req);
                    if ctx.finalize_prefill(req, t) {
                        slots[s].decode_members.push(req);
                    }
                }
            }
            ctx.ledger.record(t);
            reclaim(ctx, slots, s, t);
        }
    }
}

/// Decode writes (and chunked allocations) can overshoot capacity; evict
/// most-recent decode members of this slot until the ledger fits.
fn reclaim(ctx: &mut EngineCtx, slots: &mut [Slot], s: usize, t: u64) {
    if ctx.ledger.total > ctx.capacity() {
        let mut members = std::mem::take(&mut slots[s].decode_members);
        ctx.evict_over_capacity(&mut members, t);
        slots[s].decode_members = members;
    }
}

fn try_form(
    ctx: &mut EngineCtx,
    slots: &mut [Slot],
    in_flight: &mut [Option<Step>],
    heap: &mut BinaryHeap<Reverse<(u64, u32)>>,
    s: usize,
    t: u64,
    hybrid: bool,
) {
    if in_flight[s].is_some() {
        return;
    }
    let step = if hybrid { form_hybrid(ctx, &mut slots[s]) } else { form_separate(ctx, &mut slots[s]) };
    let Some(step) = step else { return };

    let (compute, kv_read, phase) = match &step {
        Step::Prefill { tokens, .. } => (*tokens, 0, Phase::Prefill),
        Step::Decode { members } => {
            let kv = members.iter().map(|&m| ctx.ledger.tokens_of(m)).sum();
            ctx.max_decode_batch = ctx.max_decode_batch.max(members.len() as u64);
            (members.len() as u64, kv, Phase::Decode)
        }
        Step::Hybrid { members, chunks } => {
            let mut kv: u64 = members.iter().map(|&m| ctx.ledger.tokens_of(m)).sum();
            // Each chunk re-reads the KV of its previously prefilled tokens.
            for &(req, _) in chunks {
                kv += ctx.ledger.tokens_of(req);
            }
            let compute =
                members.len() as u64 + chunks.iter().map(|&(_, c)| c).sum::<u64>();
            ctx.max_decode_batch = ctx.max_decode_batch.max(members.len() as u64);
            (compute, kv, Phase::Decode)
        }
    };
    let cost = ctx.step_durations(compute, kv_read);
    let id = ctx.next_batch_id();
    let booking = ctx.book(t, &cost, id, phase);
    heap.push(Reverse((booking.exit_ns, s as u32)));
    in_flight[s] = Some(step);
}

fn form_separate(ctx: &mut EngineCtx, slot: &mut Slot) -> Option<Step> {
    let can_decode = !slot.decode_members.is_empty();
    let want_prefill = !ctx.pending.is_empty() && !(slot.last_was_prefill && can_decode);
    if want_prefill {
        if let Some((members, tokens)) = form_prefill_batch(ctx) {
            slot.last_was_prefill = true;
            return Some(Step::Prefill { members, tokens });
        }
    }
    if can_decode {
        slot.last_was_prefill = false;
        return Some(Step::Decode { members: slot.decode_members.clone() });
    }
    None
}

/// Greedy prefill packing under the token budget, admitting only requests
/// whose KV will fit alongside everything resident or already promised.
fn form_prefill_batch(ctx: &mut EngineCtx) -> Option<(Vec<usize>, u64)> {
    let capacity = ctx.capacity();
    let mut members = Vec::new();
    let mut tokens = 0u64;
    while let Some(&front) = ctx.pending.front() {
        if !members.is_empty() && tokens + front.tokens > ctx.params.token_budget {
            break;
        }
        if ctx.ledger.total + ctx.reserved + tokens + front.tokens > capacity {
            break;
        }
        ctx.pending.pop_front();
        members.push(front.id as usize);
        tokens += front.tokens;
        if tokens >= ctx.params.token_budget {
            break;
        }
    }
    if members.is_empty() {
        None
    } else {
        ctx.reserved += tokens;
        Some((members, tokens))
    }
}

fn form_hybrid(ctx: &mut EngineCtx, slot: &mut Slot) -> Option<Step> {
    let members = slot.decode_members.clone();
    let mut budget_left = ctx.params.token_budget.saturating_sub(members.len() as u64);
    let mut chunks: Vec<(usize, u64)> = Vec::new();
    let chunk_size = ctx.params.chunk_size as u64;

    // One chunk per in-progress prefill per step (chunks of one request
    // are sequentially dependent).
    for cp in slot.active_prefills.iter() {
        if budget_left == 0 {
            break;
        }
        let remaining = ctx.reqs[cp.req].effective_input() - cp.done;
        let chunk = chunk_size.min(remaining).min(budget_left);
        if chunk > 0 {
            chunks.push((cp.req, chunk));
            budget_left -= chunk;
        }
    }
    // Start new prefills while budget and memory allow.
    while budget_left > 0 {
        let Some(&front) = ctx.pending.front() else { break };
        if ctx.ledger.total + ctx.reserved + front.tokens > ctx.capacity() {
            break;
        }
        ctx.pending.pop_front();
        ctx.reserved += front.tokens;
        let req = front.id as usize;
        slot.active_prefills.push_back(ChunkProgress { req, done: 0 });
        let chunk = chunk_size.min(front.tokens).min(budget_left);
        chunks.push((req, chunk));
        budget_left -= chunk;
    }

    if members.is_empty() && chunks.is_empty() {
        None
    } else {
        Some(Step::Hybrid { members, chunks })
    }
}
