//! Quick policy-comparison probe used while tuning scenarios.

use tdsim::engine::{self, DecodeSwitchMode, Policy, PolicyParams, PrefillSwitchMode};
use tdsim::predictor::{fit_buckets, Predictor};
use tdsim::specs::{presets, ClusterSpec};
use tdsim::workload::{generate_workload, LengthDist};

fn main() {
    let model = presets::model("qwen2.5-32b").unwrap();
    let hw = presets::hardware("a100").unwrap();
    let cluster = ClusterSpec::new(hw, 4, &model, 0.05).unwrap();
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let workload = generate_workload(
        n,
        &LengthDist::lognormal(5.0, 1.0),
        &LengthDist::lognormal(4.5, 1.0),
        42,
    )
    .unwrap();
    let training = generate_workload(
        2000,
        &LengthDist::lognormal(5.0, 1.0),
        &LengthDist::lognormal(4.5, 1.0),
        43,
    )
    .unwrap();
    let bucket = Predictor::Bucket {
        buckets: fit_buckets(&training).unwrap(),
        misclass_rate: 0.45,
        seed: 7,
    };
    println!(
        "workload: n={} mean_in={:.1} mean_out={:.1} total_tokens={}",
        n,
        workload.mean_input_len(),
        workload.mean_output_len(),
        workload.total_input_tokens() + workload.total_output_tokens()
    );
    println!("kv capacity tokens: {}", cluster.kv_capacity_tokens(&model));

    let params = PolicyParams::default();
    for policy in Policy::all() {
        let t0 = std::time::Instant::now();
        let r = engine::run(policy, &workload, &model, &cluster, &params, &bucket).unwrap();
        println!(
            "{:8} thr={:>10.1} bubble={:.4} makespan={:>8.2}s phases={} evict={} maxbatch={} wall={:?}",
            policy.name(),
            r.throughput,
            r.bubble_ratio,
            r.makespan_ns as f64 / 1e9,
            r.phase_spans.len(),
            r.evictions,
            r.max_decode_batch,
            t0.elapsed()
        );
    }

    // Ablation probes on the oracle predictor.
    let oracle = Predictor::Oracle;
    println!("\nswitch-ratio sweep (prefill->decode):");
    for ratio in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let p = PolicyParams {
            prefill_switch: PrefillSwitchMode::OccupancyRatio { ratio },
            ..params.clone()
        };
        let r = engine::run(Policy::TdPipe, &workload, &model, &cluster, &p, &oracle).unwrap();
        println!("  ratio {ratio:.1}: thr={:.1}", r.throughput);
    }
    let r = engine::run(Policy::TdPipe, &workload, &model, &cluster, &params, &oracle).unwrap();
    println!("  forecast: thr={:.1}", r.throughput);

    println!("\nfinish-ratio sweep (decode->prefill):");
    for ratio in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let p = PolicyParams {
            decode_switch: DecodeSwitchMode::FinishRatio { ratio },
            ..params.clone()
        };
        let r = engine::run(Policy::TdPipe, &workload, &model, &cluster, &p, &oracle).unwrap();
        println!("  ratio {ratio:.1}: thr={:.1}", r.throughput);
    }
    let r = engine::run(Policy::TdPipe, &workload, &model, &cluster, &params, &oracle).unwrap();
    println!("  intensity: thr={:.1}", r.throughput);
}
