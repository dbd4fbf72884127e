//! Request sets with synthetic length distributions and trace-file I/O.
//!
//! All requests arrive at t=0 (offline batch workloads). Generation is
//! reproducible across platforms: the PRNG is ChaCha8 seeded with the
//! workload seed, uniform doubles are taken from the top 53 bits of each
//! 64-bit draw, and normal deviates use Box-Muller. Out-of-range samples
//! are clamped rather than rejected so the sample count stays exact.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// One inference job. `true_output_len` is the ground-truth generation
/// length; predictions of it live in [`crate::predictor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub input_len: u32,
    pub true_output_len: u32,
    /// Logical arrival time; always 0 for offline workloads.
    pub arrival: u64,
}

/// An ordered collection of requests. The order is the submission order
/// used by every policy, so comparisons across policies are fair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSet {
    pub requests: Vec<Request>,
    /// Seed used to generate the set; absent for ingested traces.
    pub seed: Option<u64>,
}

impl RequestSet {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn total_input_tokens(&self) -> u64 {
        self.requests.iter().map(|r| r.input_len as u64).sum()
    }

    pub fn total_output_tokens(&self) -> u64 {
        self.requests.iter().map(|r| r.true_output_len as u64).sum()
    }

    pub fn mean_input_len(&self) -> f64 {
        if self.requests.is_empty() {
            return 0.0;
        }
        self.total_input_tokens() as f64 / self.requests.len() as f64
    }

    pub fn mean_output_len(&self) -> f64 {
        if self.requests.is_empty() {
            return 0.0;
        }
        self.total_output_tokens() as f64 / self.requests.len() as f64
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        let mut seen = HashSet::with_capacity(self.requests.len());
        for r in &self.requests {
            if r.input_len < 1 || r.true_output_len < 1 {
                return Err(WorkloadError::InvalidLength { id: r.id });
            }
            if !seen.insert(r.id) {
                return Err(WorkloadError::DuplicateId { id: r.id });
            }
        }
        Ok(())
    }
}

/// Token-length distribution with clamping to `[1, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Constant { value: u32 },
    Uniform { lo: u32, hi: u32 },
    /// Lognormal in token space: `round(exp(mu + sigma * z))`, clamped to
    /// `[1, max_len]`.
    LogNormal { mu: f64, sigma: f64, max_len: u32 },
}

/// Default clamp for generated input lengths.
pub const DEFAULT_MAX_LEN: u32 = 1024;

impl LengthDist {
    pub fn lognormal(mu: f64, sigma: f64) -> Self {
        LengthDist::LogNormal { mu, sigma, max_len: DEFAULT_MAX_LEN }
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        let ok = match *self {
            LengthDist::Constant { value } => value >= 1,
            LengthDist::Uniform { lo, hi } => lo >= 1 && hi >= lo,
            LengthDist::LogNormal { mu, sigma, max_len } => {
                mu.is_finite() && sigma.is_finite() && sigma > 0.0 && max_len >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::InvalidDistribution(format!("{self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            LengthDist::Constant { value } => value,
            LengthDist::Uniform { lo, hi } => {
                let span = (hi - lo) as u64 + 1;
                let u = unit_f64(rng);
                lo + ((u * span as f64) as u64).min(span - 1) as u32
            }
            LengthDist::LogNormal { mu, sigma, max_len } => {
                let z = standard_normal(rng);
                let x = (mu + sigma * z).exp().round();
                (x.max(1.0) as u64).min(max_len as u64) as u32
            }
        }
    }
}

/// Uniform in [0, 1) from the top 53 bits of one 64-bit draw.
pub(crate) fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal deviate via Box-Muller; consumes two draws.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - unit_f64(rng); // (0, 1]
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid distribution parameters: {0}")]
    InvalidDistribution(String),
    #[error("count must be >= 1")]
    EmptyCount,
    #[error("request {id}: lengths must be >= 1")]
    InvalidLength { id: u64 },
    #[error("duplicate request id {id}")]
    DuplicateId { id: u64 },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Generate `count` requests with the given input/output length
/// distributions. Bit-identical output for a fixed `(count, dists, seed)`.
pub fn generate_workload(
    count: usize,
    input_dist: &LengthDist,
    output_dist: &LengthDist,
    seed: u64,
) -> Result<RequestSet, WorkloadError> {
    if count < 1 {
        return Err(WorkloadError::EmptyCount);
    }
    input_dist.validate()?;
    output_dist.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let requests = (0..count as u64)
        .map(|id| {
            let input_len = input_dist.sample(&mut rng);
            let true_output_len = output_dist.sample(&mut rng);
            Request { id, input_len, true_output_len, arrival: 0 }
        })
        .collect();
    Ok(RequestSet { requests, seed: Some(seed) })
}

/// Parse a trace file: one `id,input_len,output_len` record per line,
/// `#`-prefixed comment lines and blank lines skipped.
pub fn load_trace(path: &Path) -> Result<RequestSet, WorkloadError> {
    let text = std::fs::read_to_string(path)?;
    parse_trace(&text)
}

/// Parse trace text; see [`load_trace`] for the format.
pub fn parse_trace(text: &str) -> Result<RequestSet, WorkloadError> {
    let mut requests = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |name: &str| -> Result<&str, WorkloadError> {
            fields.next().map(str::trim).ok_or_else(|| WorkloadError::Parse {
                line: line_no,
                reason: format!("missing field `{name}`"),
            })
        };
        let id = parse_int(next("id")?, line_no)?;
        let input_len = parse_int(next("input_len")?, line_no)? as u32;
        let output_len = parse_int(next("output_len")?, line_no)? as u32;
        if fields.next().is_some() {
            return Err(WorkloadError::Parse {
                line: line_no,
                reason: "trailing fields after output_len".into(),
            });
        }
        requests.push(Request { id, input_len, true_output_len: output_len, arrival: 0 });
    }
    let set = RequestSet { requests, seed: None };
    set.validate()?;
    Ok(set)
}

fn parse_int(s: &str, line: usize) -> Result<u64, WorkloadError> {
    s.parse::<u64>().map_err(|_| WorkloadError::Parse {
        line,
        reason: format!("`{s}` is not a base-10 integer"),
    })
}

/// Serialize a request set in the trace-file format accepted by
/// [`load_trace`]. The seed is not persisted; the format carries no field
/// for it.
pub fn trace_to_string(set: &RequestSet) -> String {
    let mut out = String::from("# id,input_len,output_len\n");
    for r in &set.requests {
        let _ = writeln!(out, "{},{},{}", r.id, r.input_len, r.true_output_len);
    }
    out
}

pub fn save_trace(set: &RequestSet, path: &Path) -> Result<(), WorkloadError> {
    std::fs::write(path, trace_to_string(set))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_distribution() {
        let rs = generate_workload(
            4,
            &LengthDist::Constant { value: 8 },
            &LengthDist::Constant { value: 4 },
            7,
        )
        .unwrap();
        assert_eq!(rs.len(), 4);
        for r in &rs.requests {
            assert_eq!(r.input_len, 8);
            assert_eq!(r.true_output_len, 4);
            assert_eq!(r.arrival, 0);
        }
    }

    #[test]
    fn uniform_bounds_and_determinism() {
        let a = generate_workload(
            1000,
            &LengthDist::Uniform { lo: 1, hi: 1024 },
            &LengthDist::Uniform { lo: 1, hi: 512 },
            1,
        )
        .unwrap();
        let b = generate_workload(
            1000,
            &LengthDist::Uniform { lo: 1, hi: 1024 },
            &LengthDist::Uniform { lo: 1, hi: 512 },
            1,
        )
        .unwrap();
        assert_eq!(a, b);
        for r in &a.requests {
            assert!((1..=1024).contains(&r.input_len));
            assert!((1..=512).contains(&r.true_output_len));
        }
    }

    // Mean of the clamped lognormal, computed from the closed form:
    // E[clamp(X, 1, m)] = E[X; 1 < X < m] + P(X <= 1) + m * P(X >= m),
    // with E[X; a < X < b] = exp(mu + s^2/2) * (Phi((ln b - mu - s^2)/s)
    //                                         - Phi((ln a - mu - s^2)/s)).
    fn clamped_lognormal_mean(mu: f64, sigma: f64, max_len: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let std = Normal::new(0.0, 1.0).unwrap();
        let phi = |x: f64| std.cdf(x);
        let lo = 1.0_f64;
        let mid = (mu + sigma * sigma / 2.0).exp()
            * (phi((max_len.ln() - mu - sigma * sigma) / sigma)
                - phi((lo.ln() - mu - sigma * sigma) / sigma));
        let below = phi((lo.ln() - mu) / sigma);
        let above = 1.0 - phi((max_len.ln() - mu) / sigma);
        mid + lo * below + max_len * above
    }

    #[test]
    fn lognormal_mean_matches_truncated_oracle() {
        let rs = generate_workload(
            5000,
            &LengthDist::lognormal(5.0, 1.0),
            &LengthDist::lognormal(4.5, 1.0),
            42,
        )
        .unwrap();
        let expected_in = clamped_lognormal_mean(5.0, 1.0, 1024.0);
        let expected_out = clamped_lognormal_mean(4.5, 1.0, 1024.0);
        let got_in = rs.mean_input_len();
        let got_out = rs.mean_output_len();
        assert!(
            (got_in - expected_in).abs() / expected_in < 0.05,
            "input mean {got_in} vs analytic {expected_in}"
        );
        assert!(
            (got_out - expected_out).abs() / expected_out < 0.05,
            "output mean {got_out} vs analytic {expected_out}"
        );
    }

    #[test]
    fn invalid_distribution_rejected() {
        assert!(generate_workload(
            1,
            &LengthDist::Uniform { lo: 0, hi: 4 },
            &LengthDist::Constant { value: 1 },
            0
        )
        .is_err());
        assert!(generate_workload(
            1,
            &LengthDist::Constant { value: 1 },
            &LengthDist::LogNormal { mu: 1.0, sigma: 0.0, max_len: 10 },
            0
        )
        .is_err());
    }

    #[test]
    fn parse_two_records_in_order() {
        let rs = parse_trace("1,100,50\n2,200,10\n").unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs.requests[0], Request { id: 1, input_len: 100, true_output_len: 50, arrival: 0 });
        assert_eq!(rs.requests[1].id, 2);
    }

    #[test]
    fn empty_file_is_empty_set() {
        let rs = parse_trace("").unwrap();
        assert!(rs.is_empty());
    }

    #[test]
    fn zero_output_len_rejected() {
        let err = parse_trace("1,100,0\n").unwrap_err();
        assert!(matches!(err, WorkloadError::InvalidLength { id: 1 }));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_trace("1,100,50\nnot-a-record\n").unwrap_err();
        match err {
            WorkloadError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = parse_trace("1,100,50\n1,200,10\n").unwrap_err();
        assert!(matches!(err, WorkloadError::DuplicateId { id: 1 }));
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let rs = parse_trace("# header\n\n3,7,9\n").unwrap();
        assert_eq!(rs.len(), 1);
        assert_eq!(rs.requests[0].id, 3);
    }

    proptest::proptest! {
        #[test]
        fn trace_round_trip(seed in 0u64..1000, count in 1usize..200) {
            let rs = generate_workload(
                count,
                &LengthDist::Uniform { lo: 1, hi: 900 },
                &LengthDist::lognormal(4.0, 0.8),
                seed,
            ).unwrap();
            let loaded = parse_trace(&trace_to_string(&rs)).unwrap();
            proptest::prop_assert_eq!(&loaded.requests, &rs.requests);
        }
    }
}
