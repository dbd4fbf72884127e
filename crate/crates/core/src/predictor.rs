//! Output-length prediction behind a uniform interface.
//!
//! Three interchangeable predictors stand in for a learned classifier:
//! `Oracle` returns the true output length, `Bucket` returns the mean of
//! the percentile bucket the request falls into (optionally misclassifying
//! a fraction of requests into an adjacent bucket), and `Noisy` applies
//! mean-one lognormal multiplicative noise to the true length. All
//! predictions are pure functions of `(seed, request id)`.
//!
//! Percentiles use the nearest-rank definition: the P-th percentile of a
//! sorted sample of n values is the value at 1-based index
//! `max(1, ceil(P/100 * n))`.

use crate::workload::{Request, RequestSet};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Percentile cuts used by default when fitting buckets. The first and the
/// last cut follow the published bucket scheme ([P0, P25) up to [P99, +));
/// the interior cuts are configurable.
pub const DEFAULT_PERCENTILES: [f64; 7] = [0.0, 25.0, 50.0, 75.0, 90.0, 95.0, 99.0];

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("training set is empty")]
    EmptyTraining,
    #[error("group_size must be >= 1")]
    BadGroupSize,
    #[error("no prediction for request {id}")]
    MissingPrediction { id: u64 },
}

/// Percentile bucket boundaries with the mean true output length of the
/// training members in each bucket. The last bucket is open-ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBuckets {
    /// Strictly ascending bucket lower bounds.
    pub boundaries: Vec<u32>,
    /// Mean training output length per bucket.
    pub bucket_means: Vec<f64>,
}

impl LengthBuckets {
    /// Index of the bucket containing `len` (lengths below the first
    /// boundary map to bucket 0).
    pub fn bucket_index(&self, len: u32) -> usize {
        match self.boundaries.binary_search(&len) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }

    pub fn num_buckets(&self) -> usize {
        self.boundaries.len()
    }

    /// One `boundary,mean` line per bucket, for inspection.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# boundary,mean\n");
        for (b, m) in self.boundaries.iter().zip(&self.bucket_means) {
            let _ = writeln!(out, "{b},{m}");
        }
        out
    }
}

fn nearest_rank(sorted: &[u32], percentile: f64) -> u32 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Fit percentile buckets over the training set's true output lengths
/// using [`DEFAULT_PERCENTILES`].
pub fn fit_buckets(training: &RequestSet) -> Result<LengthBuckets, PredictorError> {
    fit_buckets_with(training, &DEFAULT_PERCENTILES)
}

/// Fit buckets at the given percentile cuts. Duplicate cut values collapse
/// into one bucket, so boundaries stay strictly ascending.
pub fn fit_buckets_with(
    training: &RequestSet,
    percentiles: &[f64],
) -> Result<LengthBuckets, PredictorError> {
    if training.is_empty() || percentiles.is_empty() {
        return Err(PredictorError::EmptyTraining);
    }
    let mut sorted: Vec<u32> = training.requests.iter().map(|r| r.true_output_len).collect();
    sorted.sort_unstable();

    let mut boundaries: Vec<u32> = Vec::with_capacity(percentiles.len());
    for &p in percentiles {
        let cut = nearest_rank(&sorted, p);
        if boundaries.last() != Some(&cut) {
            boundaries.push(cut);
        }
    }

    let mut sums = vec![0.0f64; boundaries.len()];
    let mut counts = vec![0u64; boundaries.len()];
    let probe = LengthBuckets { boundaries: boundaries.clone(), bucket_means: Vec::new() };
    for &len in &sorted {
        let i = probe.bucket_index(len);
        sums[i] += len as f64;
        counts[i] += 1;
    }
    let bucket_means = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(LengthBuckets { boundaries, bucket_means })
}

/// A predicted output length for one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub request_id: u64,
    pub predicted_len: u32,
}

/// Serializable predictor configuration; see [`Predictor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorConfig {
    Oracle,
    Bucket { misclass_rate: f64, seed: u64 },
    Noisy { sigma: f64, seed: u64 },
}

/// An output-length predictor, immutable after construction.
#[derive(Debug, Clone)]
pub enum Predictor {
    /// Returns the true output length.
    Oracle,
    /// Returns the mean of the percentile bucket holding the request's
    /// true output length; with probability `misclass_rate` the request is
    /// relocated to an adjacent bucket (per-request deterministic).
    Bucket { buckets: LengthBuckets, misclass_rate: f64, seed: u64 },
    /// True length scaled by mean-one lognormal noise
    /// `exp(sigma*z - sigma^2/2)`, clamped to >= 1.
    Noisy { sigma: f64, seed: u64 },
}

impl Predictor {
    pub fn from_config(
        config: &PredictorConfig,
        training: Option<&RequestSet>,
    ) -> Result<Self, PredictorError> {
        Ok(match config {
            PredictorConfig::Oracle => Predictor::Oracle,
            PredictorConfig::Bucket { misclass_rate, seed } => {
                let training = training.ok_or(PredictorError::EmptyTraining)?;
                Predictor::Bucket {
                    buckets: fit_buckets(training)?,
                    misclass_rate: *misclass_rate,
                    seed: *seed,
                }
            }
            PredictorConfig::Noisy { sigma, seed } => {
                Predictor::Noisy { sigma: *sigma, seed: *seed }
            }
        })
    }

    pub fn predict(&self, request: &Request) -> Prediction {
        let predicted_len = match self {
            Predictor::Oracle => request.true_output_len,
            Predictor::Bucket { buckets, misclass_rate, seed } => {
                let mut idx = buckets.bucket_index(request.true_output_len);
                if *misclass_rate > 0.0 && buckets.num_buckets() > 1 {
                    let mut rng = per_request_rng(*seed, request.id);
                    if crate::workload::unit_f64(&mut rng) < *misclass_rate {
                        let up = crate::workload::unit_f64(&mut rng) < 0.5;
                        idx = adjacent_bucket(idx, buckets.num_buckets(), up);
                    }
                }
                (buckets.bucket_means[idx].round() as u32).max(1)
            }
            Predictor::Noisy { sigma, seed } => {
                let mut rng = per_request_rng(*seed, request.id);
                let z = crate::workload::standard_normal(&mut rng);
                let factor = (sigma * z - sigma * sigma / 2.0).exp();
                ((request.true_output_len as f64 * factor).round() as u32).max(1)
            }
        };
        Prediction { request_id: request.id, predicted_len }
    }

    /// Predicted bucket index, for accuracy measurements. `None` for
    /// non-bucket predictors.
    pub fn predicted_bucket(&self, request: &Request) -> Option<usize> {
        match self {
            Predictor::Bucket { buckets, misclass_rate, seed } => {
                let mut idx = buckets.bucket_index(request.true_output_len);
                if *misclass_rate > 0.0 && buckets.num_buckets() > 1 {
                    let mut rng = per_request_rng(*seed, request.id);
                    if crate::workload::unit_f64(&mut rng) < *misclass_rate {
                        let up = crate::workload::unit_f64(&mut rng) < 0.5;
                        idx = adjacent_bucket(idx, buckets.num_buckets(), up);
                    }
                }
                Some(idx)
            }
            _ => None,
        }
    }
}

fn adjacent_bucket(idx: usize, num_buckets: usize, up: bool) -> usize {
    if up {
        if idx + 1 < num_buckets {
            idx + 1
        } else {
            idx - 1
        }
    } else if idx > 0 {
        idx - 1
    } else {
        idx + 1
    }
}

fn per_request_rng(seed: u64, id: u64) -> ChaCha8Rng {
    // SplitMix-style mixing so nearby ids decorrelate.
    let mixed = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Mean over consecutive groups of `group_size` requests of
/// `|sum(predicted) - sum(actual)| / sum(actual)`. A trailing partial
/// group counts as a group.
pub fn accumulated_error(
    predictions: &[Prediction],
    actuals: &RequestSet,
    group_size: usize,
) -> Result<f64, PredictorError> {
    if group_size < 1 {
        return Err(PredictorError::BadGroupSize);
    }
    let mut by_id = std::collections::HashMap::with_capacity(predictions.len());
    for p in predictions {
        by_id.insert(p.request_id, p.predicted_len);
    }
    let mut errors = Vec::new();
    for group in actuals.requests.chunks(group_size) {
        let mut pred_sum = 0u64;
        let mut act_sum = 0u64;
        for r in group {
            let p = by_id
                .get(&r.id)
                .ok_or(PredictorError::MissingPrediction { id: r.id })?;
            pred_sum += *p as u64;
            act_sum += r.true_output_len as u64;
        }
        errors.push((pred_sum as f64 - act_sum as f64).abs() / act_sum as f64);
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}
