//! Model, hardware, and cluster descriptions plus derived KV-cache
//! memory arithmetic.
//!
//! Conventions: hardware capacities and rates are decimal (GB = 10^9
//! bytes); KV-total sanity checks against published per-model numbers are
//! evaluated in GiB (2^30) to match the arithmetic they were derived with.
//! Both appear in the tests below.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transformer dimensions and weight footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u32,
    pub num_heads: u32,
    /// Equals `num_heads` unless the model uses grouped-query attention.
    pub num_kv_heads: u32,
    pub hidden_size: u32,
    /// Bytes per element (2 for FP16/BF16).
    pub dtype_bytes: u32,
    /// Total weight bytes.
    pub param_bytes: u64,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("model `{0}`: {1}")]
    InvalidModel(String, String),
    #[error("hardware `{0}`: {1}")]
    InvalidHardware(String, String),
    #[error("num_stages {stages} exceeds num_layers {layers}")]
    TooManyStages { stages: u32, layers: u32 },
    #[error(
        "device memory exhausted: {weight_bytes} weight bytes + {reserve_bytes} reserve \
         leave no KV capacity on a {capacity}-byte device"
    )]
    NoKvCapacity { weight_bytes: u64, reserve_bytes: u64, capacity: u64 },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let err = |m: &str| Err(SpecError::InvalidModel(self.name.clone(), m.to_string()));
        if self.num_layers < 1 || self.num_heads < 1 || self.num_kv_heads < 1 {
            return err("layer/head counts must be >= 1");
        }
        if self.hidden_size < 1 || self.dtype_bytes < 1 {
            return err("hidden_size and dtype_bytes must be >= 1");
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return err("num_kv_heads must divide num_heads");
        }
        if self.hidden_size % self.num_heads != 0 {
            return err("hidden_size must be divisible by num_heads");
        }
        Ok(())
    }

    /// KV-cache bytes held per token position:
    /// `2 (K and V) * num_layers * (hidden * num_kv_heads / num_heads) * dtype_bytes`.
    pub fn kv_bytes_per_token(&self) -> u64 {
        let head_dim = (self.hidden_size / self.num_heads) as u64;
        2 * self.num_layers as u64 * head_dim * self.num_kv_heads as u64 * self.dtype_bytes as u64
    }

    /// Total KV bytes for `num_requests` sequences of `avg_len` tokens.
    pub fn total_kv_bytes(&self, num_requests: u64, avg_len: u64) -> u64 {
        num_requests * avg_len * self.kv_bytes_per_token()
    }

    /// Number of weight parameters (param_bytes / dtype_bytes).
    pub fn num_params(&self) -> u64 {
        self.param_bytes / self.dtype_bytes as u64
    }
}

/// Balanced layer-wise split: counts sum to `num_layers`, max-min <= 1,
/// earlier stages take the extra layer on non-divisible splits.
pub fn partition_model(model: &ModelSpec, num_stages: u32) -> Result<Vec<u32>, SpecError> {
    if num_stages < 1 || num_stages > model.num_layers {
        return Err(SpecError::TooManyStages { stages: num_stages, layers: model.num_layers });
    }
    let base = model.num_layers / num_stages;
    let extra = model.num_layers % num_stages;
    Ok((0..num_stages).map(|s| base + u32::from(s < extra)).collect())
}

/// Device roofline parameters. Rates in FLOP/s and bytes/s, capacities in
/// bytes, latency in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    /// Dense half-precision throughput.
    pub flops_per_s: f64,
    pub mem_bw: f64,
    pub mem_capacity: u64,
    pub p2p_bw: f64,
    pub p2p_latency: f64,
    pub allreduce_bw: f64,
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let positive = self.flops_per_s > 0.0
            && self.mem_bw > 0.0
            && self.mem_capacity > 0
            && self.p2p_bw > 0.0
            && self.p2p_latency >= 0.0
            && self.allreduce_bw > 0.0;
        if positive {
            Ok(())
        } else {
            Err(SpecError::InvalidHardware(
                self.name.clone(),
                "all rates and capacities must be > 0".into(),
            ))
        }
    }
}

/// Default fraction of device memory reserved for activations.
pub const DEFAULT_ACTIVATION_RESERVE: f64 = 0.05;

/// A homogeneous single-node cluster with the model already partitioned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub device: HardwareSpec,
    pub num_devices: u32,
    /// Bytes left for KV cache on each device after subtracting the
    /// largest per-stage weight share and the activation reserve.
    pub kv_capacity_per_device: u64,
}

impl ClusterSpec {
    /// Build a cluster for `model` split over `num_devices` pipeline
    /// stages (or sharded `num_devices` ways for tensor parallelism; the
    /// per-device weight share is the same for balanced splits).
    pub fn new(
        device: HardwareSpec,
        num_devices: u32,
        model: &ModelSpec,
        activation_reserve: f64,
    ) -> Result<Self, SpecError> {
        device.validate()?;
        model.validate()?;
        let counts = partition_model(model, num_devices.min(model.num_layers).max(1))?;
        let max_layers = *counts.iter().max().unwrap() as u64;
        // Conservative: size the per-device pool for the heaviest stage.
        let weight_bytes = model.param_bytes * max_layers / model.num_layers as u64;
        let reserve_bytes = (device.mem_capacity as f64 * activation_reserve) as u64;
        let kv = device
            .mem_capacity
            .checked_sub(weight_bytes)
            .and_then(|x| x.checked_sub(reserve_bytes))
            .unwrap_or(0);
        if kv == 0 {
            return Err(SpecError::NoKvCapacity {
                weight_bytes,
                reserve_bytes,
                capacity: device.mem_capacity,
            });
        }
        Ok(ClusterSpec { device, num_devices, kv_capacity_per_device: kv })
    }

    pub fn total_kv_capacity_bytes(&self) -> u64 {
        self.kv_capacity_per_device * self.num_devices as u64
    }

    /// Aggregate KV capacity in whole token positions for `model`.
    pub fn kv_capacity_tokens(&self, model: &ModelSpec) -> u64 {
        self.total_kv_capacity_bytes() / model.kv_bytes_per_token()
    }
}

/// Built-in model and hardware profiles used by the packaged scenarios.
pub mod presets {
    use super::*;

    const GB: u64 = 1_000_000_000;

    pub fn hardware(name: &str) -> Result<HardwareSpec, SpecError> {
        // Point-to-point numbers are not published for these nodes; the
        // defaults reuse the measured all-reduce rate with a 20 us launch
        // latency and are overridable in spec files.
        let spec = match name {
            "l20" => HardwareSpec {
                name: "l20".into(),
                flops_per_s: 119.5e12,
                mem_bw: 864.0e9,
                mem_capacity: 48 * GB,
                p2p_bw: 14.65e9,
                p2p_latency: 20e-6,
                allreduce_bw: 14.65e9,
            },
            "a100" => HardwareSpec {
                name: "a100".into(),
                flops_per_s: 312.0e12,
                mem_bw: 1935.0e9,
                mem_capacity: 80 * GB,
                p2p_bw: 14.82e9,
                p2p_latency: 20e-6,
                allreduce_bw: 14.82e9,
            },
            other => return Err(SpecError::UnknownPreset(other.to_string())),
        };
        Ok(spec)
    }

    pub fn model(name: &str) -> Result<ModelSpec, SpecError> {
        let spec = match name {
            "llama2-13b" => ModelSpec {
                name: "llama2-13b".into(),
                num_layers: 40,
                num_heads: 40,
                num_kv_heads: 40,
                hidden_size: 5120,
                dtype_bytes: 2,
                param_bytes: 26 * GB,
            },
            "qwen2.5-32b" => ModelSpec {
                name: "qwen2.5-32b".into(),
                num_layers: 64,
                num_heads: 40,
                num_kv_heads: 8,
                hidden_size: 5120,
                dtype_bytes: 2,
                param_bytes: 64 * GB,
            },
            "llama2-70b" => ModelSpec {
                name: "llama2-70b".into(),
                num_layers: 80,
                num_heads: 64,
                num_kv_heads: 8,
                hidden_size: 8192,
                dtype_bytes: 2,
                param_bytes: 140 * GB,
            },
            "llama-30b" => ModelSpec {
                name: "llama-30b".into(),
                num_layers: 60,
                num_heads: 52,
                num_kv_heads: 52,
                hidden_size: 6656,
                dtype_bytes: 2,
                param_bytes: 65 * GB,
            },
            other => return Err(SpecError::UnknownPreset(other.to_string())),
        };
        Ok(spec)
    }

    pub fn model_names() -> &'static [&'static str] {
        &["llama2-13b", "qwen2.5-32b", "llama2-70b", "llama-30b"]
    }

    pub fn hardware_names() -> &'static [&'static str] {
        &["l20", "a100"]
    }
}
