//! Deterministic simulator and scheduling-policy library for
//! pipeline-parallel LLM inference.
//!
//! The crate models a multi-GPU node running offline, throughput-oriented
//! generative inference. A roofline cost model prices prefill batches,
//! decode steps, and communication; a discrete-event engine replays full
//! runs under several batching policies:
//!
//! - `TdPipe`: long prefill-only and decode-only phases with a forecast-based
//!   prefill-to-decode switch, inter-batch work stealing during decode, and a
//!   spatial/temporal intensity rule for switching back to prefill.
//! - `PpSb` / `PpHb`: pipeline-parallel baselines with separate or hybrid
//!   (chunked-prefill) batching.
//! - `TpSb` / `TpHb`: tensor-parallel baselines with per-layer all-reduce
//!   costs on a single logical executor.
//!
//! Runs are bit-deterministic: simulated time is integer nanoseconds, all
//! randomness is seeded, and no iteration-order-dependent containers feed
//! the event loop.

pub mod cost;
pub mod engine;
pub mod metrics;
pub mod predictor;
pub mod scheduler;
pub mod specs;
pub mod workload;

pub use engine::{Policy, PolicyParams, RunResult};
pub use specs::{ClusterSpec, HardwareSpec, ModelSpec};
pub use workload::{Request, RequestSet};
