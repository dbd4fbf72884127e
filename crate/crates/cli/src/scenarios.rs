//! Packaged scenario presets: one-command reproductions of the standard
//! experiment shapes (overall throughput comparison, KV-usage timeline,
//! switching and stealing ablations).

use crate::config::{
    ClusterSection, HardwareSection, ModelSection, PolicySection, PredictorSection, RunConfig,
    WorkloadSection,
};
use anyhow::{bail, Result};
use tdsim::engine::PolicyParams;
use tdsim::workload::LengthDist;

pub fn names() -> &'static [&'static str] {
    &[
        "a100-32b-4gpu-tdpipe",
        "l20-13b-4gpu-tdpipe",
        "overall-comparison",
        "kv-timeline",
        "imbalance-stealing",
        "smoke",
    ]
}

pub fn scenario(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        // Conversation-trace-like lengths: inputs under 1024 tokens,
        // outputs a few hundred.
        "a100-32b-4gpu-tdpipe" => base(
            "a100",
            "qwen2.5-32b",
            4,
            "tdpipe",
            5000,
            42,
            bucket_predictor(),
        ),
        "l20-13b-4gpu-tdpipe" => base(
            "l20",
            "llama2-13b",
            4,
            "tdpipe",
            5000,
            42,
            bucket_predictor(),
        ),
        "overall-comparison" => base(
            "a100",
            "qwen2.5-32b",
            4,
            "tdpipe",
            2500,
            42,
            bucket_predictor(),
        ),
        "kv-timeline" => base(
            "a100",
            "qwen2.5-32b",
            4,
            "tdpipe",
            4000,
            42,
            PredictorSection {
                kind: "oracle".into(),
                misclass_rate: 0.0,
                sigma: 0.3,
                seed: 7,
                training_count: 2000,
            },
        ),
        // Output lengths correlated with submission order, so the
        // decode-entry split produces batches that drain unevenly.
        "imbalance-stealing" => {
            let mut cfg = base(
                "a100",
                "qwen2.5-32b",
                4,
                "tdpipe",
                3000,
                42,
                PredictorSection {
                    kind: "oracle".into(),
                    misclass_rate: 0.0,
                    sigma: 0.3,
                    seed: 7,
                    training_count: 2000,
                },
            );
            cfg.workload.output = Some(LengthDist::Uniform { lo: 16, hi: 768 });
            cfg
        }
        "smoke" => {
            let mut cfg = base(
                "l20",
                "llama2-13b",
                2,
                "tdpipe",
                64,
                7,
                PredictorSection {
                    kind: "oracle".into(),
                    misclass_rate: 0.0,
                    sigma: 0.3,
                    seed: 7,
                    training_count: 200,
                },
            );
            cfg.workload.input = Some(LengthDist::Uniform { lo: 16, hi: 256 });
            cfg.workload.output = Some(LengthDist::Uniform { lo: 4, hi: 64 });
            cfg
        }
        other => bail!("unknown scenario `{other}`; see list-presets"),
    };
    Ok(cfg)
}

fn bucket_predictor() -> PredictorSection {
    PredictorSection {
        kind: "bucket".into(),
        misclass_rate: 0.45,
        sigma: 0.3,
        seed: 7,
        training_count: 2000,
    }
}

fn base(
    hardware: &str,
    model: &str,
    devices: u32,
    policy: &str,
    count: usize,
    seed: u64,
    predictor: PredictorSection,
) -> RunConfig {
    RunConfig {
        seed,
        workload: WorkloadSection {
            trace: None,
            count: Some(count),
            input: Some(LengthDist::lognormal(5.0, 1.0)),
            output: Some(LengthDist::lognormal(4.5, 1.0)),
        },
        model: ModelSection::Preset { preset: model.into() },
        hardware: HardwareSection::Preset { preset: hardware.into() },
        cluster: ClusterSection {
            devices,
            activation_reserve: tdsim::specs::DEFAULT_ACTIVATION_RESERVE,
        },
        policy: PolicySection { kind: policy.into(), params: PolicyParams::default() },
        predictor,
    }
}
