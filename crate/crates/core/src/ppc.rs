//! Posterior predictive checks.
//!
//! A check replicates the data `K` times from the model's own posterior
//! predictive, evaluates the test statistic on every replicate against the
//! full posterior-integrated predictive, and locates the observed value in
//! that empirical distribution.
//!
//! The uncertainty mode decides how models are drawn for a replicate:
//!
//! - `Bayesian`: one model for the whole replicate (shared `θ`).
//! - `ConditionallyIndependent`: a fresh model for every row.
//! - `PointEstimate(m)`: model `m` only; the posterior is a point mass.
//!
//! Replicate `k` draws from its own ChaCha8 stream, `seed` with stream id
//! `k`. Within a replicate, model indices are drawn first, then one label
//! per row in row order. A single-model posterior consumes no randomness
//! for model indices, so all three modes coincide bit-for-bit when `M = 1`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::predictive::{sample_categorical, PosteriorWeights};
use crate::statistic::{PreparedStatistic, TestStatistic};
use crate::statistics::{check_weights, EnsemblePredictions, Labels};

/// Default number of replicated data sets.
pub const DEFAULT_REPLICATIONS: usize = 1000;

/// How model uncertainty couples the rows of a replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    Bayesian,
    ConditionallyIndependent,
    PointEstimate(usize),
}

impl UncertaintyMode {
    /// Posterior weights actually used under this mode.
    pub fn effective_weights(
        &self,
        weights: &PosteriorWeights,
        models: usize,
    ) -> Result<PosteriorWeights> {
        check_weights(weights, models)?;
        match *self {
            UncertaintyMode::PointEstimate(m) => PosteriorWeights::point_mass(m, models),
            _ => Ok(weights.clone()),
        }
    }
}

impl fmt::Display for UncertaintyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UncertaintyMode::Bayesian => write!(f, "bayesian"),
            UncertaintyMode::ConditionallyIndependent => write!(f, "independent"),
            UncertaintyMode::PointEstimate(m) => write!(f, "point:{m}"),
        }
    }
}

impl FromStr for UncertaintyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayesian" => Ok(UncertaintyMode::Bayesian),
            "independent" => Ok(UncertaintyMode::ConditionallyIndependent),
            other => match other.strip_prefix("point:") {
                Some(idx) => idx
                    .parse()
                    .map(UncertaintyMode::PointEstimate)
                    .map_err(|_| invalid(format!("bad model index in mode '{other}'"))),
                None => Err(invalid(format!(
                    "unknown mode '{other}' (expected bayesian, independent or point:IDX)"
                ))),
            },
        }
    }
}

/// The RNG stream for replicate `k`.
pub fn replicate_stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Draws one replicated label vector `y^rep`.
pub fn replicate_labels<R: Rng + ?Sized>(
    preds: &EnsemblePredictions,
    weights: &PosteriorWeights,
    mode: UncertaintyMode,
    rng: &mut R,
) -> Result<Labels> {
    let n = preds.rows();
    let m = preds.models();
    check_weights(weights, m)?;
    if let UncertaintyMode::PointEstimate(idx) = mode {
        if idx >= m {
            return Err(invalid(format!("point estimate index {idx} out of range for {m} models")));
        }
    }
    let models = draw_models(weights, mode, n, rng);
    let model_of = |i: usize| match &models {
        ModelDraw::Shared(m) => *m,
        ModelDraw::PerRow(v) => v[i],
    };
    Ok(match preds {
        EnsemblePredictions::Classification(p) => Labels::Classes(
            (0..n)
                .map(|i| sample_categorical(p.probs(i, model_of(i)), rng))
                .collect(),
        ),
        EnsemblePredictions::Regression(p) => {
            Labels::Targets((0..n).map(|i| p.get(i, model_of(i)).sample(rng)).collect())
        }
    })
}

enum ModelDraw {
    Shared(usize),
    PerRow(Vec<usize>),
}

fn draw_models<R: Rng + ?Sized>(
    weights: &PosteriorWeights,
    mode: UncertaintyMode,
    rows: usize,
    rng: &mut R,
) -> ModelDraw {
    match mode {
        UncertaintyMode::Bayesian => ModelDraw::Shared(weights.sample_index(rng)),
        UncertaintyMode::ConditionallyIndependent => {
            ModelDraw::PerRow((0..rows).map(|_| weights.sample_index(rng)).collect())
        }
        UncertaintyMode::PointEstimate(m) => ModelDraw::Shared(m),
    }
}

/// The replicated statistic values `𝒯` and their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticSamples {
    pub samples: Vec<f64>,
    pub observed: Option<f64>,
    pub seed: u64,
    pub mode: UncertaintyMode,
    pub statistic: TestStatistic,
}

impl StatisticSamples {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Samples `K` replicated statistic values.
///
/// Replicates are evaluated in parallel on the current rayon pool; the
/// output is identical to sequential evaluation.
pub fn sample_statistic(
    preds: &EnsemblePredictions,
    weights: &PosteriorWeights,
    statistic: &TestStatistic,
    mode: UncertaintyMode,
    replications: usize,
    seed: u64,
) -> Result<StatisticSamples> {
    let effective = mode.effective_weights(weights, preds.models())?;
    let prepared = PreparedStatistic::new(statistic, preds, &effective, replications)?;
    let samples = sample_prepared(preds, weights, &prepared, mode, replications, seed)?;
    Ok(StatisticSamples {
        samples,
        observed: None,
        seed,
        mode,
        statistic: statistic.clone(),
    })
}

fn sample_prepared(
    preds: &EnsemblePredictions,
    weights: &PosteriorWeights,
    prepared: &PreparedStatistic<'_>,
    mode: UncertaintyMode,
    replications: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if replications == 0 {
        return Err(invalid("number of replications must be at least 1"));
    }
    // Validate once so that worker errors can only come from evaluation.
    replicate_labels(preds, weights, mode, &mut replicate_stream(seed, 0))?;
    (0..replications as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_stream(seed, k);
            let labels = replicate_labels(preds, weights, mode, &mut rng)?;
            prepared.evaluate(&labels)
        })
        .collect()
}

/// Fraction of samples strictly below `observed`.
pub fn p_value(samples: &[f64], observed: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("statistic samples"));
    }
    let below = samples.iter().filter(|&&t| t < observed).count();
    Ok(below as f64 / samples.len() as f64)
}

/// Quantile by linear interpolation between adjacent order statistics.
///
/// `sorted` must be ascending; position `q · (K − 1)` is interpolated.
pub fn interpolated_quantile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput("statistic samples"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Width between the 95th and 5th interpolated percentiles.
pub fn sharpness(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(invalid(format!(
            "sharpness needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let sorted = sorted_copy(samples);
    Ok(interpolated_quantile(&sorted, 0.95)? - interpolated_quantile(&sorted, 0.05)?)
}

fn sorted_copy(samples: &[f64]) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
}

/// Box-plot percentiles of the replicated statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

impl Percentiles {
    pub fn of(samples: &[f64]) -> Result<Self> {
        let sorted = sorted_copy(samples);
        Ok(Self {
            p5: interpolated_quantile(&sorted, 0.05)?,
            p25: interpolated_quantile(&sorted, 0.25)?,
            p50: interpolated_quantile(&sorted, 0.50)?,
            p75: interpolated_quantile(&sorted, 0.75)?,
            p95: interpolated_quantile(&sorted, 0.95)?,
        })
    }
}

/// Outcome of one posterior predictive check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcReport {
    pub statistic: TestStatistic,
    pub mode: UncertaintyMode,
    pub p_value: f64,
    pub sharpness: f64,
    /// The check passes when the p-value is neither 0 nor 1.
    pub passed: bool,
    pub percentiles: Percentiles,
    pub observed: f64,
    pub replications: usize,
    pub seed: u64,
}

/// Runs a complete check of `labels` against the model's posterior predictive.
pub fn run_ppc(
    preds: &EnsemblePredictions,
    weights: &PosteriorWeights,
    labels: &Labels,
    statistic: &TestStatistic,
    mode: UncertaintyMode,
    replications: usize,
    seed: u64,
) -> Result<PpcReport> {
    Ok(run_ppc_with_samples(preds, weights, labels, statistic, mode, replications, seed)?.0)
}

/// Like [`run_ppc`], also returning the replicated statistic values.
pub fn run_ppc_with_samples(
    preds: &EnsemblePredictions,
    weights: &PosteriorWeights,
    labels: &Labels,
    statistic: &TestStatistic,
    mode: UncertaintyMode,
    replications: usize,
    seed: u64,
) -> Result<(PpcReport, StatisticSamples)> {
    statistic.check_compatible(preds)?;
    labels.validate_for(preds)?;
    let effective = mode.effective_weights(weights, preds.models())?;
    let prepared = PreparedStatistic::new(statistic, preds, &effective, replications + 1)?;
    let observed = prepared.evaluate(labels)?;
    let samples = sample_prepared(preds, weights, &prepared, mode, replications, seed)?;
    let p = p_value(&samples, observed)?;
    let sharp = if samples.len() >= 2 {
        sharpness(&samples)?
    } else {
        0.0
    };
    let report = PpcReport {
        statistic: statistic.clone(),
        mode,
        p_value: p,
        sharpness: sharp,
        passed: p != 0.0 && p != 1.0,
        percentiles: Percentiles::of(&samples)?,
        observed,
        replications,
        seed,
    };
    let samples = StatisticSamples {
        samples,
        observed: Some(observed),
        seed,
        mode,
        statistic: statistic.clone(),
    };
    Ok((report, samples))
}
