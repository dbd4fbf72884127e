//! Run configuration files, command dispatch, and output emission.
//!
//! A run configuration is one TOML document naming the workload source,
//! model/hardware presets or explicit specs, device count, policy and
//! parameters, predictor, and seed. Every run copies its configuration
//! into the output directory so results are self-describing. The only
//! environment variable honored is `TDSIM_OUT`, which overrides the
//! default output directory.

use anyhow::{anyhow, bail, Context, Result};
use clap::Subcommand;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tdsim::engine::{self, DecodeSwitchMode, Policy, PolicyParams, PrefillSwitchMode, RunResult};
use tdsim::metrics::{self, CompareScenario};
use tdsim::predictor::{fit_buckets, Predictor};
use tdsim::specs::{presets, ClusterSpec, HardwareSpec, ModelSpec};
use tdsim::workload::{self, LengthDist, RequestSet};

#[derive(Subcommand)]
pub enum Command {
    /// Simulate one run and write summary, trace, timeline, and the
    /// echoed config.
    Run {
        /// Path to a TOML run configuration.
        #[arg(long, conflicts_with = "scenario")]
        config: Option<PathBuf>,
        /// Name of a packaged scenario (see list-presets).
        #[arg(long)]
        scenario: Option<String>,
        /// Output directory (default ./tdsim-out, or $TDSIM_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every policy over a device grid on one workload and tabulate.
    Compare {
        #[arg(long, conflicts_with = "scenario")]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        /// Comma-separated device counts.
        #[arg(long, default_value = "1,2,4")]
        devices: String,
        /// Comma-separated policy names (default: all five).
        #[arg(long)]
        policies: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter-grid ablations; cells run concurrently.
    Sweep {
        /// One of: switch-ratio, finish-ratio, stealing.
        #[arg(long)]
        kind: String,
        #[arg(long, conflicts_with = "scenario")]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        /// Worker threads for sweep cells.
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic workload trace file.
    GenWorkload {
        #[arg(long)]
        count: usize,
        /// Distribution, e.g. "constant:8", "uniform:1,1024",
        /// "lognormal:5.0,1.0,1024".
        #[arg(long)]
        input: String,
        #[arg(long)]
        output: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Destination trace file.
        #[arg(long)]
        path: PathBuf,
    },
    /// List packaged model, hardware, and scenario presets.
    ListPresets,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workload: WorkloadSection,
    pub model: ModelSection,
    pub hardware: HardwareSection,
    pub cluster: ClusterSection,
    pub policy: PolicySection,
    pub predictor: PredictorSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub input: Option<LengthDist>,
    #[serde(default)]
    pub output: Option<LengthDist>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSection {
    Preset { preset: String },
    Full(ModelSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HardwareSection {
    Preset { preset: String },
    Full(HardwareSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub devices: u32,
    #[serde(default = "default_reserve")]
    pub activation_reserve: f64,
}

fn default_reserve() -> f64 {
    tdsim::specs::DEFAULT_ACTIVATION_RESERVE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: String,
    #[serde(default)]
    pub params: PolicyParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSection {
    pub kind: String,
    #[serde(default)]
    pub misclass_rate: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Training-set size for the bucket predictor, generated from the
    /// workload distributions with `seed + 1`.
    #[serde(default = "default_training_count")]
    pub training_count: usize,
}

fn default_sigma() -> f64 {
    0.3
}

fn default_training_count() -> usize {
    2000
}

pub struct Resolved {
    pub policy: Policy,
    pub workload: RequestSet,
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    pub cluster: ClusterSpec,
    pub params: PolicyParams,
    pub predictor: Predictor,
    pub activation_reserve: f64,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let policy = Policy::from_name(&self.policy.kind)
            .ok_or_else(|| anyhow!("policy.kind: unknown policy `{}`", self.policy.kind))?;
        let workload = self.build_workload()?;
        let model = match &self.model {
            ModelSection::Preset { preset } => presets::model(preset)
                .map_err(|e| anyhow!("model.preset: {e}"))?,
            ModelSection::Full(spec) => {
                spec.validate().map_err(|e| anyhow!("model: {e}"))?;
                spec.clone()
            }
        };
        let hardware = match &self.hardware {
            HardwareSection::Preset { preset } => presets::hardware(preset)
                .map_err(|e| anyhow!("hardware.preset: {e}"))?,
            HardwareSection::Full(spec) => {
                spec.validate().map_err(|e| anyhow!("hardware: {e}"))?;
                spec.clone()
            }
        };
        let cluster = ClusterSpec::new(
            hardware.clone(),
            self.cluster.devices,
            &model,
            self.cluster.activation_reserve,
        )
        .map_err(|e| anyhow!("cluster.devices: {e}"))?;
        let predictor = self.build_predictor(&workload)?;
        Ok(Resolved {
            policy,
            workload,
            model,
            hardware,
            cluster,
            params: self.policy.params.clone(),
            predictor,
            activation_reserve: self.cluster.activation_reserve,
        })
    }

    fn build_workload(&self) -> Result<RequestSet> {
        let w = &self.workload;
        if let Some(trace) = &w.trace {
            return workload::load_trace(trace)
                .map_err(|e| anyhow!("workload.trace: {e}"));
        }
        let count = w.count.ok_or_else(|| anyhow!("workload.count: missing"))?;
        let input = w.input.clone().ok_or_else(|| anyhow!("workload.input: missing"))?;
        let output = w.output.clone().ok_or_else(|| anyhow!("workload.output: missing"))?;
        workload::generate_workload(count, &input, &output, self.seed)
            .map_err(|e| anyhow!("workload: {e}"))
    }

    fn build_predictor(&self, run_workload: &RequestSet) -> Result<Predictor> {
        let p = &self.predictor;
        match p.kind.as_str() {
            "oracle" => Ok(Predictor::Oracle),
            "noisy" => Ok(Predictor::Noisy { sigma: p.sigma, seed: p.seed }),
            "bucket" => {
                // Historical data stand-in: an independent draw from the
                // workload distributions, or the trace itself.
                let training = match (&self.workload.input, &self.workload.output) {
                    (Some(input), Some(output)) => workload::generate_workload(
                        p.training_count,
                        input,
                        output,
                        self.seed + 1,
                    )
                    .map_err(|e| anyhow!("predictor.training: {e}"))?,
                    _ => run_workload.clone(),
                };
                Ok(Predictor::Bucket {
                    buckets: fit_buckets(&training)
                        .map_err(|e| anyhow!("predictor: {e}"))?,
                    misclass_rate: p.misclass_rate,
                    seed: p.seed,
                })
            }
            other => bail!("predictor.kind: unknown predictor `{other}`"),
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, scenario, out } => {
            let (cfg, echo) = load_config(config.as_deref(), scenario.as_deref())?;
            let out_dir = output_dir(out, "run");
            cmd_run(&cfg, echo, &out_dir)
        }
        Command::Compare { config, scenario, devices, policies, out } => {
            let (cfg, _) = load_config(config.as_deref(), scenario.as_deref())?;
            let out_dir = output_dir(out, "compare");
            let devices = parse_u32_list(&devices)?;
            let policies = parse_policies(policies.as_deref())?;
            cmd_compare(&cfg, &policies, &devices, &out_dir)
        }
        Command::Sweep { kind, config, scenario, workers, out } => {
            let (cfg, _) = load_config(config.as_deref(), scenario.as_deref())?;
            let out_dir = output_dir(out, "sweep");
            cmd_sweep(&cfg, &kind, workers, &out_dir)
        }
        Command::GenWorkload { count, input, output, seed, path } => {
            let input = parse_dist(&input)?;
            let output = parse_dist(&output)?;
            let set = workload::generate_workload(count, &input, &output, seed)?;
            workload::save_trace(&set, &path)?;
            println!("wrote {} requests to {}", set.len(), path.display());
            Ok(())
        }
        Command::ListPresets => {
            println!("models:");
            for name in presets::model_names() {
                println!("  {name}");
            }
            println!("hardware:");
            for name in presets::hardware_names() {
                println!("  {name}");
            }
            println!("scenarios:");
            for name in crate::scenarios::names() {
                println!("  {name}");
            }
            Ok(())
        }
    }
}

fn load_config(config: Option<&Path>, scenario: Option<&str>) -> Result<(RunConfig, Option<String>)> {
    match (config, scenario) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let cfg: RunConfig = toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            Ok((cfg, Some(text)))
        }
        (None, Some(name)) => Ok((crate::scenarios::scenario(name)?, None)),
        (None, None) => bail!("pass --config FILE or --scenario NAME"),
    }
}

fn output_dir(explicit: Option<PathBuf>, kind: &str) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("TDSIM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("tdsim-out/{kind}")))
}

fn parse_u32_list(text: &str) -> Result<Vec<u32>> {
    text.split(',')
        .map(|s| s.trim().parse::<u32>().map_err(|_| anyhow!("bad device count `{s}`")))
        .collect()
}

fn parse_policies(text: Option<&str>) -> Result<Vec<Policy>> {
    match text {
        None => Ok(Policy::all().to_vec()),
        Some(list) => {
            if list.trim().is_empty() {
                bail!("policy list is empty");
            }
            list.split(',')
                .map(|s| {
                    Policy::from_name(s.trim())
                        .ok_or_else(|| anyhow!("unknown policy `{}`", s.trim()))
                })
                .collect()
        }
    }
}

fn parse_dist(text: &str) -> Result<LengthDist> {
    let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
    let nums: Vec<&str> = rest.split(',').filter(|s| !s.is_empty()).collect();
    let dist = match (kind, nums.as_slice()) {
        ("constant", [v]) => LengthDist::Constant { value: v.parse()? },
        ("uniform", [lo, hi]) => LengthDist::Uniform { lo: lo.parse()?, hi: hi.parse()? },
        ("lognormal", [mu, sigma]) => LengthDist::lognormal(mu.parse()?, sigma.parse()?),
        ("lognormal", [mu, sigma, max]) => LengthDist::LogNormal {
            mu: mu.parse()?,
            sigma: sigma.parse()?,
            max_len: max.parse()?,
        },
        _ => bail!("bad distribution `{text}`; expected constant:V, uniform:LO,HI, or lognormal:MU,SIGMA[,MAX]"),
    };
    Ok(dist)
}

fn cmd_run(cfg: &RunConfig, echo: Option<String>, out_dir: &Path) -> Result<()> {
    let resolved = cfg.resolve()?;
    let result = engine::run(
        resolved.policy,
        &resolved.workload,
        &resolved.model,
        &resolved.cluster,
        &resolved.params,
        &resolved.predictor,
    )?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("summary.txt"), result.summary())?;
    metrics::export_trace(&result, &out_dir.join("trace.json"))?;
    let timeline = metrics::kv_timeline(&result, metrics::default_sample_interval(&result));
    std::fs::write(out_dir.join("timeline.csv"), metrics::timeline_to_csv(&timeline))?;
    std::fs::write(out_dir.join("config.toml"), echo.unwrap_or_else(|| cfg.to_toml()))?;
    write_decisions(&result, out_dir)?;
    if let Predictor::Bucket { buckets, .. } = &resolved.predictor {
        std::fs::write(out_dir.join("buckets.txt"), buckets.to_text())?;
    }
    println!("{}", result.summary());
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn write_decisions(result: &RunResult, out_dir: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::from("t_ns,kind,detail\n");
    for d in &result.decisions {
        let _ = writeln!(text, "{},{},\"{}\"", d.t_ns, d.kind, d.detail);
    }
    std::fs::write(out_dir.join("decisions.csv"), text)?;
    Ok(())
}

fn cmd_compare(
    cfg: &RunConfig,
    policies: &[Policy],
    devices: &[u32],
    out_dir: &Path,
) -> Result<()> {
    let resolved = cfg.resolve()?;
    let scenario = CompareScenario {
        workload: &resolved.workload,
        model: &resolved.model,
        hardware: &resolved.hardware,
        params: &resolved.params,
        predictor: &resolved.predictor,
        activation_reserve: resolved.activation_reserve,
    };
    let table = metrics::compare(policies, devices, &scenario)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("table.csv"), table.to_csv())?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    print!("{}", table.to_csv());
    println!("table in {}", out_dir.join("table.csv").display());
    Ok(())
}

/// One sweep cell: a labelled variant of the base configuration.
struct SweepCell {
    label: String,
    params: PolicyParams,
}

fn sweep_cells(kind: &str, base: &PolicyParams) -> Result<Vec<SweepCell>> {
    let ratios = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let cells = match kind {
        "switch-ratio" => {
            let mut cells: Vec<SweepCell> = ratios
                .iter()
                .map(|&ratio| SweepCell {
                    label: format!("ratio-{ratio:.1}"),
                    params: PolicyParams {
                        prefill_switch: PrefillSwitchMode::OccupancyRatio { ratio },
                        ..base.clone()
                    },
                })
                .collect();
            cells.push(SweepCell {
                label: "forecast".into(),
                params: PolicyParams {
                    prefill_switch: PrefillSwitchMode::Forecast,
                    ..base.clone()
                },
            });
            cells
        }
        "finish-ratio" => {
            let mut cells: Vec<SweepCell> = ratios
                .iter()
                .map(|&ratio| SweepCell {
                    label: format!("ratio-{ratio:.1}"),
                    params: PolicyParams {
                        decode_switch: DecodeSwitchMode::FinishRatio { ratio },
                        ..base.clone()
                    },
                })
                .collect();
            cells.push(SweepCell {
                label: "intensity".into(),
                params: PolicyParams {
                    decode_switch: DecodeSwitchMode::Intensity,
                    ..base.clone()
                },
            });
            cells
        }
        "stealing" => vec![
            SweepCell {
                label: "steal-on".into(),
                params: PolicyParams { steal: true, ..base.clone() },
            },
            SweepCell {
                label: "steal-off".into(),
                params: PolicyParams { steal: false, ..base.clone() },
            },
        ],
        other => bail!("unknown sweep kind `{other}` (switch-ratio, finish-ratio, stealing)"),
    };
    Ok(cells)
}

fn cmd_sweep(cfg: &RunConfig, kind: &str, workers: usize, out_dir: &Path) -> Result<()> {
    use rayon::prelude::*;
    let resolved = cfg.resolve()?;
    let cells = sweep_cells(kind, &resolved.params)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("building sweep pool")?;
    let results: Vec<Result<(String, RunResult)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let result = engine::run(
                    resolved.policy,
                    &resolved.workload,
                    &resolved.model,
                    &resolved.cluster,
                    &cell.params,
                    &resolved.predictor,
                )?;
                Ok((cell.label.clone(), result))
            })
            .collect()
    });
    use std::fmt::Write as _;
    let mut csv = String::from("cell,throughput,bubble_ratio,makespan_ns\n");
    for r in results {
        let (label, result) = r?;
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{}",
            label, result.throughput, result.bubble_ratio, result.makespan_ns
        );
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("sweep.csv"), &csv)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    print!("{csv}");
    Ok(())
}
