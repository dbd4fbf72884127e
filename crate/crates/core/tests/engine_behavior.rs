//! Engine-level behavior: phase structure, completion timing, chunking,
//! degenerate-pipeline equivalences, and stealing effects.

use tdsim::engine::{self, chunked_prefill_splitter, Policy, PolicyParams};
use tdsim::metrics::{Phase, Resource};
use tdsim::predictor::Predictor;
use tdsim::specs::{presets, ClusterSpec};
use tdsim::workload::{generate_workload, LengthDist};

fn small_cluster(devices: u32) -> (tdsim::ModelSpec, ClusterSpec) {
    let model = presets::model("llama2-13b").unwrap();
    let hw = presets::hardware("l20").unwrap();
    let cluster = ClusterSpec::new(hw, devices, &model, 0.05).unwrap();
    (model, cluster)
}

fn constant_workload(count: usize, input: u32, output: u32) -> tdsim::RequestSet {
    generate_workload(
        count,
        &LengthDist::Constant { value: input },
        &LengthDist::Constant { value: output },
        1,
    )
    .unwrap()
}

#[test]
fn chunk_splitter_arithmetic() {
    let chunks = chunked_prefill_splitter(1000, 512).unwrap();
    assert_eq!(chunks.len(), 2);
    assert_eq!(chunks[0].len, 512);
    assert_eq!(chunks[0].prior_tokens, 0);
    assert_eq!(chunks[1].len, 488);
    assert_eq!(chunks[1].prior_tokens, 512);

    let single = chunked_prefill_splitter(300, 512).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].prior_tokens, 0);

    assert!(chunked_prefill_splitter(10, 0).is_err());
}

#[test]
fn chunk_reread_total_matches_closed_form() {
    // Total re-read tokens for input L, chunk c: c * k(k-1)/2, k = ceil(L/c).
    for (l, c) in [(1000u64, 128u32), (4096, 512), (77, 10), (512, 512)] {
        let chunks = chunked_prefill_splitter(l, c).unwrap();
        let per_chunk: u64 = chunks.iter().map(|ch| ch.prior_tokens).sum();
        let k = l.div_ceil(c as u64);
        assert_eq!(per_chunk, c as u64 * k * (k - 1) / 2, "L={l} c={c}");
    }
}

#[test]
fn completion_happens_at_true_output_len_minus_one_decode_steps() {
    // One request, output length T: the prefill emits token 1 and the
    // request takes exactly T-1 decode steps.
    let (model, cluster) = small_cluster(1);
    let workload = constant_workload(1, 64, 5);
    let result = engine::run(
        Policy::TdPipe,
        &workload,
        &model,
        &cluster,
        &PolicyParams::default(),
        &Predictor::Oracle,
    )
    .unwrap();
    let decode_steps = result
        .events
        .iter()
        .filter(|e| e.phase == Phase::Decode && matches!(e.resource, Resource::Stage(_)))
        .count();
    assert_eq!(decode_steps, 4, "T=5 needs exactly T-1 decode steps");
    assert_eq!(result.tokens_out, 5);
}

#[test]
fn single_token_outputs_never_reach_decode() {
    let (model, cluster) = small_cluster(2);
    let workload = constant_workload(6, 32, 1);
    let result = engine::run(
        Policy::TdPipe,
        &workload,
        &model,
        &cluster,
        &PolicyParams::default(),
        &Predictor::Oracle,
    )
    .unwrap();
    assert!(result.events.iter().all(|e| e.phase == Phase::Prefill));
    assert_eq!(result.tokens_out, 6);
}

#[test]
fn one_device_policies_coincide_within_overhead() {
    // A single executor serializes everything, so the three batching
    // styles only differ in step-count bookkeeping.
    let (model, cluster) = small_cluster(1);
    let workload = constant_workload(40, 128, 33);
    let params = PolicyParams::default();
    let mut throughputs = Vec::new();
    for policy in [Policy::TdPipe, Policy::PpSb, Policy::TpSb] {
        let r = engine::run(policy, &workload, &model, &cluster, &params, &Predictor::Oracle)
            .unwrap();
        assert_eq!(r.tokens_out, 40 * 33, "token conservation under {policy:?}");
        throughputs.push(r.throughput);
    }
    let max = throughputs.iter().cloned().fold(f64::MIN, f64::max);
    let min = throughputs.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        (max - min) / max < 0.05,
        "1-device schedules should coincide within overhead: {throughputs:?}"
    );
}

#[test]
fn tdpipe_beats_pp_sb_bubbles_on_constant_workload() {
    let (model, cluster) = small_cluster(4);
    let workload = constant_workload(256, 256, 64);
    let params = PolicyParams::default();
    let td = engine::run(Policy::TdPipe, &workload, &model, &cluster, &params, &Predictor::Oracle)
        .unwrap();
    let pp = engine::run(Policy::PpSb, &workload, &model, &cluster, &params, &Predictor::Oracle)
        .unwrap();
    assert!(
        td.bubble_ratio < pp.bubble_ratio,
        "TD bubbles {} should undercut PP+SB bubbles {}",
        td.bubble_ratio,
        pp.bubble_ratio
    );
}

#[test]
fn phases_alternate_starting_with_prefill() {
    let (model, cluster) = small_cluster(4);
    let workload = generate_workload(
        600,
        &LengthDist::Uniform { lo: 64, hi: 512 },
        &LengthDist::Uniform { lo: 16, hi: 256 },
        3,
    )
    .unwrap();
    let result = engine::run(
        Policy::TdPipe,
        &workload,
        &model,
        &cluster,
        &PolicyParams::default(),
        &Predictor::Oracle,
    )
    .unwrap();
    assert!(!result.phase_spans.is_empty());
    assert_eq!(result.phase_spans[0].phase, Phase::Prefill);
    for w in result.phase_spans.windows(2) {
        assert_ne!(w[0].phase, w[1].phase, "phases must alternate");
        assert!(w[0].end_ns <= w[1].start_ns, "spans must not overlap");
    }
}

#[test]
fn stealing_reduces_imbalance_bubbles() {
    // Outputs correlated with submission order: the contiguous decode
    // split gives batch 0 short requests, so it drains first.
    let (model, cluster) = small_cluster(4);
    let mut requests = Vec::new();
    for i in 0..480u64 {
        let out = if i < 120 { 24 } else { 192 };
        requests.push(tdsim::Request {
            id: i,
            input_len: 128,
            true_output_len: out,
            arrival: 0,
        });
    }
    let workload = tdsim::RequestSet { requests, seed: None };
    let on = PolicyParams { steal: true, ..PolicyParams::default() };
    let off = PolicyParams { steal: false, ..PolicyParams::default() };
    let with = engine::run(Policy::TdPipe, &workload, &model, &cluster, &on, &Predictor::Oracle)
        .unwrap();
    let without =
        engine::run(Policy::TdPipe, &workload, &model, &cluster, &off, &Predictor::Oracle)
            .unwrap();
    assert_eq!(with.tokens_out, without.tokens_out);
    assert!(
        with.throughput > without.throughput,
        "stealing should help: {} vs {}",
        with.throughput,
        without.throughput
    );
}

#[test]
fn determinism_identical_summaries_and_traces() {
    let (model, cluster) = small_cluster(4);
    let workload = generate_workload(
        300,
        &LengthDist::lognormal(5.0, 1.0),
        &LengthDist::lognormal(4.0, 0.8),
        9,
    )
    .unwrap();
    let params = PolicyParams::default();
    let a = engine::run(Policy::TdPipe, &workload, &model, &cluster, &params, &Predictor::Oracle)
        .unwrap();
    let b = engine::run(Policy::TdPipe, &workload, &model, &cluster, &params, &Predictor::Oracle)
        .unwrap();
    assert_eq!(a.summary(), b.summary());
    assert_eq!(
        tdsim::metrics::trace_to_json(&a),
        tdsim::metrics::trace_to_json(&b)
    );
}

#[test]
fn hybrid_policies_complete_and_conserve_tokens() {
    let (model, cluster) = small_cluster(4);
    let workload = generate_workload(
        200,
        &LengthDist::Uniform { lo: 100, hi: 900 },
        &LengthDist::Uniform { lo: 8, hi: 128 },
        5,
    )
    .unwrap();
    let expected: u64 = workload.total_output_tokens();
    for policy in [Policy::PpHb, Policy::TpHb, Policy::TpSb] {
        let r = engine::run(
            policy,
            &workload,
            &model,
            &cluster,
            &PolicyParams::default(),
            &Predictor::Oracle,
        )
        .unwrap();
        assert_eq!(r.tokens_out, expected, "token conservation under {policy:?}");
        assert!(r.throughput > 0.0);
    }
}

#[test]
fn oversized_model_is_rejected_before_simulation() {
    let model = presets::model("llama2-70b").unwrap();
    let hw = presets::hardware("l20").unwrap();
    assert!(ClusterSpec::new(hw, 1, &model, 0.05).is_err());
}
