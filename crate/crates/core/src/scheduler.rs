//! Scheduling policies: the forecast-driven prefill-to-decode switch, the
//! sliding-window inter-batch work stealer, and the spatial/temporal
//! intensity comparison for switching back to prefill.
//!
//! Everything here is pure state-machine logic over plain values; the
//! engine owns the state and calls in sequentially. Guard conditions that
//! need engine state (no pending prefills, all batches empty) live in the
//! engine.

use crate::cost::ProfileTable;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Outcome of a phase-switch evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseDecision {
    RemainPrefill,
    SwitchToDecode,
    RemainDecode,
    SwitchToPrefill,
}

/// Forecast of total KV tokens alive at each future decode-step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvUsageMap {
    points: Vec<u32>,
    usage: Vec<u64>,
}

impl KvUsageMap {
    /// Sampling points `spacing, 2*spacing, ..., horizon`.
    pub fn new(spacing: u32, horizon: u32) -> Self {
        let points: Vec<u32> =
            (1..).map(|k| k * spacing).take_while(|&p| p <= horizon).collect();
        let usage = vec![0; points.len()];
        KvUsageMap { points, usage }
    }

    pub fn with_points(points: Vec<u32>) -> Self {
        debug_assert!(points.windows(2).all(|w| w[0] < w[1]));
        let usage = vec![0; points.len()];
        KvUsageMap { points, usage }
    }

    pub fn points(&self) -> &[u32] {
        &self.points
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn usage_at(&self, point: u32) -> Option<u64> {
        self.points.iter().position(|&p| p == point).map(|i| self.usage[i])
    }

    pub fn max_usage(&self) -> u64 {
        self.usage.iter().copied().max().unwrap_or(0)
    }

    pub fn clear(&mut self) {
        self.usage.fill(0);
    }
}

/// Add one admitted request to the forecast: for every future point
/// `fp <= predicted_len`, usage at `fp` grows by `resident_tokens + fp`
/// (the tokens it holds now plus one per future decode step).
pub fn update_usage(resident_tokens: u64, predicted_len: u32, usage: &mut KvUsageMap) {
    for (i, &fp) in usage.points.iter().enumerate() {
        if fp <= predicted_len {
            usage.usage[i] += resident_tokens + fp as u64;
        } else {
            break;
        }
    }
}

/// Switch to decode iff any forecast point strictly exceeds capacity.
pub fn check_switch(usage: &KvUsageMap, kv_capacity_tokens: u64) -> PhaseDecision {
    if usage.max_usage() > kv_capacity_tokens {
        PhaseDecision::SwitchToDecode
    } else {
        PhaseDecision::RemainPrefill
    }
}

/// A request waiting for prefill, with the token count its prefill will
/// process and the predicted number of decode steps it has left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingPrefill {
    pub id: u64,
    pub tokens: u64,
    pub predicted_len: u32,
}

/// A prefill batch formed by [`schedule_prefill`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefillBatch {
    pub ids: Vec<u64>,
    pub scheduled_tokens: u64,
}

/// Pop requests in submission order into one batch under `token_budget`
/// (a single oversized request forms a singleton batch), fold them into
/// the forecast, then evaluate the switch. The batch is returned even when
/// the decision is `SwitchToDecode`: launch precedes the check.
pub fn schedule_prefill(
    pending: &mut VecDeque<PendingPrefill>,
    usage: &mut KvUsageMap,
    kv_capacity_tokens: u64,
    token_budget: u64,
) -> (PrefillBatch, PhaseDecision) {
    let mut ids = Vec::new();
    let mut scheduled_tokens = 0u64;
    while let Some(&front) = pending.front() {
        if !ids.is_empty() && scheduled_tokens + front.tokens > token_budget {
            break;
        }
        pending.pop_front();
        ids.push(front.id);
        scheduled_tokens += front.tokens;
        update_usage(front.tokens, front.predicted_len, usage);
        if scheduled_tokens >= token_budget {
            break;
        }
    }
    let decision = check_switch(usage, kv_capacity_tokens);
    (PrefillBatch { ids, scheduled_tokens }, decision)
}

/// Outcome of one work-stealing evaluation at a batch return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StealOutcome {
    /// Requests resubmitted with the batch.
    pub submit: u32,
    /// Requests newly withheld into the pool.
    pub withheld: u32,
    /// Requests pulled from the pool to top the batch up.
    pub refilled: u32,
}

/// Sliding-window work stealer. The window holds the last W submitted
/// batch sizes (W = pipeline stages) and is seeded with the initial equal
/// split; withheld requests accumulate in a pool that refills
/// below-average batches on later returns.
#[derive(Debug, Clone)]
pub struct WorkStealer {
    window: VecDeque<u32>,
    pool: u32,
}

impl WorkStealer {
    pub fn new(initial_sizes: &[u32]) -> Self {
        assert!(!initial_sizes.is_empty());
        WorkStealer { window: initial_sizes.iter().copied().collect(), pool: 0 }
    }

    pub fn pool(&self) -> u32 {
        self.pool
    }

    pub fn window(&self) -> impl Iterator<Item = u32> + '_ {
        self.window.iter().copied()
    }

    /// Evaluate a returning batch: deduct the newly finished requests from
    /// the window sum, compare the remainder against the floored average,
    /// and either withhold the excess or top up from the pool. The window
    /// then records the submitted size.
    ///
    /// Parked requests count toward the average (they are live work the
    /// scheduler is holding); with an empty pool this is exactly the
    /// deduct-and-divide arithmetic, and with a non-empty pool it is what
    /// makes the pool drain back to zero instead of stranding work.
    pub fn on_batch_return(&mut self, returned: u32, finished: u32) -> StealOutcome {
        debug_assert!(finished <= returned);
        let remaining = returned - finished;
        let w = self.window.len() as u64;
        let sum: u64 =
            self.window.iter().map(|&s| s as u64).sum::<u64>() + self.pool as u64;
        let average = (sum.saturating_sub(finished as u64) / w) as u32;

        let outcome = if remaining > average {
            let withheld = remaining - average;
            self.pool += withheld;
            StealOutcome { submit: average, withheld, refilled: 0 }
        } else {
            let mut refilled = (average - remaining).min(self.pool);
            if remaining == 0 && average == 0 && self.pool > 0 {
                // Drain guard: parked work must not outlive the batches.
                refilled = self.pool;
            }
            self.pool -= refilled;
            StealOutcome { submit: remaining + refilled, withheld: 0, refilled }
        };
        self.window.pop_front();
        self.window.push_back(outcome.submit);
        outcome
    }
}

/// Achieved decode rate over peak rate at the current batch size
/// (Achieved/Peak). Batch size 0 maps to 0 and forces a switch.
pub fn spatial_intensity(current_batch_size: u64, table: &ProfileTable) -> f64 {
    if current_batch_size == 0 {
        return 0.0;
    }
    table.achieved_rate(current_batch_size) / table.peak_rate
}

/// One minus the switch-bubble share of the next cycle: the bubble is the
/// excess of the longest pending prefill over the current decode step, and
/// the cycle total accumulates all pending prefills, one decode step per
/// live batch, and the bubble itself.
pub fn temporal_intensity(
    pending_prefill_times: &[f64],
    current_decode_step_time: f64,
    one_decode_step_per_batch_time: f64,
) -> f64 {
    debug_assert!(!pending_prefill_times.is_empty());
    let longest = pending_prefill_times.iter().copied().fold(f64::MIN, f64::max);
    let bubble = (longest - current_decode_step_time).max(0.0);
    let total: f64 =
        pending_prefill_times.iter().sum::<f64>() + one_decode_step_per_batch_time + bubble;
    1.0 - bubble / total
}

/// Switch to prefill iff spatial intensity is strictly below temporal.
pub fn should_switch_to_prefill(spatial: f64, temporal: f64) -> PhaseDecision {
    if spatial < temporal {
        PhaseDecision::SwitchToPrefill
    } else {
        PhaseDecision::RemainDecode
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ProfileTable;

    fn points_32_64_96() -> KvUsageMap {
        KvUsageMap::with_points(vec![32, 64, 96])
    }

    #[test]
    fn update_usage_hand_example() {
        let mut usage = points_32_64_96();
        update_usage(100, 64, &mut usage);
        assert_eq!(usage.usage_at(32), Some(132));
        assert_eq!(usage.usage_at(64), Some(164));
        assert_eq!(usage.usage_at(96), Some(0));
    }

    #[test]
    fn update_usage_below_first_point_is_noop() {
        let mut usage = points_32_64_96();
        update_usage(500, 0, &mut usage);
        update_usage(500, 31, &mut usage);
        assert_eq!(usage.max_usage(), 0);
    }

    #[test]
    fn update_usage_commutes() {
        let mut a = points_32_64_96();
        update_usage(10, 40, &mut a);
        update_usage(77, 96, &mut a);
        let mut b = points_32_64_96();
        update_usage(77, 96, &mut b);
        update_usage(10, 40, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn check_switch_hand_example() {
        let mut usage = KvUsageMap::with_points(vec![32, 64]);
        usage.usage = vec![900, 1100];
        assert_eq!(check_switch(&usage, 1000), PhaseDecision::SwitchToDecode);
    }

    #[test]
    fn check_switch_empty_and_boundary() {
        let usage = points_32_64_96();
        assert_eq!(check_switch(&usage, 1), PhaseDecision::RemainPrefill);
        let mut at_cap = points_32_64_96();
        at_cap.usage = vec![1000, 0, 0];
        // Strict inequality: equal to capacity stays in prefill.
        assert_eq!(check_switch(&at_cap, 1000), PhaseDecision::RemainPrefill);
    }

    #[test]
    fn schedule_prefill_respects_budget() {
        let mut pending: VecDeque<PendingPrefill> = [
            PendingPrefill { id: 0, tokens: 300, predicted_len: 10 },
            PendingPrefill { id: 1, tokens: 300, predicted_len: 10 },
        ]
        .into();
        let mut usage = points_32_64_96();
        let (batch, decision) = schedule_prefill(&mut pending, &mut usage, 1 << 40, 512);
        assert_eq!(batch.ids, vec![0]);
        assert_eq!(batch.scheduled_tokens, 300);
        assert_eq!(decision, PhaseDecision::RemainPrefill);
        assert_eq!(pending.len(), 1);
    }

    #[test]
    fn schedule_prefill_oversized_singleton() {
        let mut pending: VecDeque<PendingPrefill> =
            [PendingPrefill { id: 7, tokens: 4096, predicted_len: 64 }].into();
        let mut usage = points_32_64_96();
        let (batch, _) = schedule_prefill(&mut pending, &mut usage, 1 << 40, 512);
        assert_eq!(batch.ids, vec![7]);
        assert_eq!(batch.scheduled_tokens, 4096);
        assert!(pending.is_empty());
    }

    #[test]
    fn schedule_prefill_triggering_batch_still_launched() {
        let mut pending: VecDeque<PendingPrefill> =
            [PendingPrefill { id: 0, tokens: 900, predicted_len: 64 }].into();
        let mut usage = points_32_64_96();
        // Forecast at 32 will be 932 > 50: the switch fires, the batch ships.
        let (batch, decision) = schedule_prefill(&mut pending, &mut usage, 50, 2048);
        assert_eq!(batch.ids, vec![0]);
        assert_eq!(decision, PhaseDecision::SwitchToDecode);
    }

    #[test]
    fn schedule_prefill_drains_small_requests() {
        let mut pending: VecDeque<PendingPrefill> = (0..3)
            .map(|i| PendingPrefill { id: i, tokens: 10, predicted_len: 64 })
            .collect();
        let mut usage = points_32_64_96();
        let mut rounds = 0;
        while !pending.is_empty() {
            let (_, decision) = schedule_prefill(&mut pending, &mut usage, 1 << 40, 2048);
            assert_eq!(decision, PhaseDecision::RemainPrefill);
            rounds += 1;
        }
        assert_eq!(rounds, 1, "three small requests fit one budget");
    }

    #[test]
    fn steal_worked_example() {
        // Four batches of 128; batch 0 returns with 48 finished.
        let mut stealer = WorkStealer::new(&[128, 128, 128, 128]);
        let first = stealer.on_batch_return(128, 48);
        // Window average after deducting the finished: (512-48)/4 = 116;
        // the 80 survivors sit below it, so all 80 are resubmitted.
        assert_eq!(first, StealOutcome { submit: 80, withheld: 0, refilled: 0 });

        // Batch 1 returns with 8 finished: average (464-8)/4 = 114, the
        // 120 survivors exceed it, 6 are stolen and 114 submitted.
        let second = stealer.on_batch_return(128, 8);
        assert_eq!(second, StealOutcome { submit: 114, withheld: 6, refilled: 0 });
        assert_eq!(stealer.pool(), 6);
    }

    #[test]
    fn steal_no_completions_is_fixed_point() {
        let mut stealer = WorkStealer::new(&[96, 96, 96, 96]);
        for _ in 0..12 {
            let out = stealer.on_batch_return(96, 0);
            assert_eq!(out, StealOutcome { submit: 96, withheld: 0, refilled: 0 });
        }
        assert_eq!(stealer.pool(), 0);
    }

    #[test]
    fn steal_conservation_per_call() {
        let mut stealer = WorkStealer::new(&[100, 120, 90, 130]);
        let mut sizes = [100u32, 120, 90, 130];
        let finished = [5u32, 30, 0, 12, 7, 0, 3, 9];
        for (i, &f) in finished.iter().enumerate() {
            let b = i % 4;
            let f = f.min(sizes[b]);
            let out = stealer.on_batch_return(sizes[b], f);
            assert_eq!(
                out.submit + out.withheld + f,
                sizes[b] + out.refilled,
                "conservation at call {i}"
            );
            sizes[b] = out.submit;
        }
    }

    #[test]
    fn steal_converges_within_w_rounds() {
        // Imbalance with a non-empty pool: once completions stop, max-min
        // across batches reaches <= 1 within W scheduling rounds.
        let mut stealer = WorkStealer::new(&[128, 128, 128, 128]);
        let mut sizes = [128u32; 4];
        // One burst of completions on batch 0 creates the imbalance.
        let out = stealer.on_batch_return(sizes[0], 60);
        sizes[0] = out.submit;
        for round in 0..4 {
            for b in 0..4 {
                if round == 0 && b == 0 {
                    continue;
                }
                let out = stealer.on_batch_return(sizes[b], 0);
                sizes[b] = out.submit;
            }
        }
        let max = *sizes.iter().max().unwrap();
        let min = *sizes.iter().min().unwrap();
        assert!(max - min <= 1, "sizes {sizes:?} pool {}", stealer.pool());
    }

    #[test]
    fn steal_pool_drains_into_empty_batches() {
        // Pool counts toward the live average, so an empty batch refills.
        let mut stealer = WorkStealer::new(&[0, 0]);
        stealer.pool = 6;
        let out = stealer.on_batch_return(0, 0);
        assert_eq!(out, StealOutcome { submit: 3, withheld: 0, refilled: 3 });
        // A sub-average residue still flushes rather than stranding.
        let mut tail = WorkStealer::new(&[0, 0, 0, 0]);
        tail.pool = 2;
        let out = tail.on_batch_return(0, 0);
        assert_eq!(out.submit, 2);
        assert_eq!(tail.pool(), 0);
    }

    fn toy_table() -> ProfileTable {
        ProfileTable::from_entries(vec![(1, 10.0), (64, 320.0), (1024, 640.0)]).unwrap()
    }

    #[test]
    fn spatial_intensity_peak_and_zero() {
        let table = toy_table();
        assert_eq!(spatial_intensity(1024, &table), 1.0);
        assert_eq!(spatial_intensity(4096, &table), 1.0);
        assert_eq!(spatial_intensity(0, &table), 0.0);
    }

    #[test]
    fn spatial_intensity_interpolates_midpoint() {
        // Choose a table whose interpolated rate at 544 is half of peak.
        let table = ProfileTable::from_entries(vec![(64, 320.0), (1024, 640.0)]).unwrap();
        let b = (64 + 1024) / 2;
        let ratio = spatial_intensity(b, &table);
        assert!((ratio - 0.75).abs() < 1e-12);
        let half = spatial_intensity(64, &table);
        assert!((half - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spatial_intensity_monotone_over_grid() {
        let table = toy_table();
        let mut last = 0.0;
        for b in 1..=1100 {
            let s = spatial_intensity(b, &table);
            assert!(s >= last, "non-monotone at {b}");
            assert!(s > 0.0 && s <= 1.0);
            last = s;
        }
    }

    #[test]
    fn temporal_intensity_units() {
        // Longest prefill below the current decode step: no bubble.
        assert_eq!(temporal_intensity(&[1.0, 0.5], 1.5, 0.1), 1.0);
        // Bubble 2s out of total 10s.
        let t = temporal_intensity(&[4.0, 3.0], 2.0, 1.0);
        assert!((t - 0.8).abs() < 1e-12, "{t}");
    }

    #[test]
    fn temporal_intensity_rises_with_more_pending_work() {
        let pending = [4.0, 3.0];
        let base = temporal_intensity(&pending, 2.0, 1.0);
        let doubled: Vec<f64> = pending.iter().chain(pending.iter()).copied().collect();
        let more = temporal_intensity(&doubled, 2.0, 1.0);
        assert!(more > base, "same bubble over a larger cycle: {more} vs {base}");
    }

    #[test]
    fn switch_rule_is_strict() {
        assert_eq!(should_switch_to_prefill(0.6, 0.9), PhaseDecision::SwitchToPrefill);
        assert_eq!(should_switch_to_prefill(1.0, 1.0), PhaseDecision::RemainDecode);
        assert_eq!(should_switch_to_prefill(0.7, 0.7), PhaseDecision::RemainDecode);
    }

    proptest::proptest! {
        #[test]
        fn steal_pool_and_window_stay_consistent(
            initial in proptest::collection::vec(1u32..300, 2..8),
            returns in proptest::collection::vec((0u32..300, 0u32..300), 1..64),
        ) {
            let w = initial.len();
            let mut stealer = WorkStealer::new(&initial);
            let mut sizes = initial.clone();
            for (i, &(_, fin)) in returns.iter().enumerate() {
                let b = i % w;
                let f = fin.min(sizes[b]);
                let out = stealer.on_batch_return(sizes[b], f);
                proptest::prop_assert_eq!(out.submit + out.withheld + f, sizes[b] + out.refilled);
                sizes[b] = out.submit;
            }
        }

        #[test]
        fn intensities_stay_in_unit_interval(
            pending in proptest::collection::vec(0.001f64..100.0, 1..16),
            current in 0.0f64..100.0,
            per_batch in 0.0f64..100.0,
        ) {
            let t = temporal_intensity(&pending, current, per_batch);
            proptest::prop_assert!(t > 0.0 && t <= 1.0, "t = {}", t);
        }
    }
}
