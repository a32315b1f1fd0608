//! Univariate predictive distributions and the posterior-integrated mixture.
//!
//! A model with a finite posterior is a weighted set of component
//! predictives `p(y | x, θ_m)`. The predictive CDF once `θ` is integrated
//! out is the weighted sum of the component CDFs:
//!
//! ```text
//! F(y | x) = Σ_m w_m · F(y | x, θ_m)
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance on probability vectors summing to one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A Gaussian with a strictly positive standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    #[serde(rename = "std")]
    pub stddev: f64,
}

impl Gaussian {
    pub fn new(mean: f64, stddev: f64) -> Result<Self> {
        if !mean.is_finite() || !stddev.is_finite() || stddev <= 0.0 {
            return Err(invalid(format!(
                "gaussian needs finite mean and positive finite stddev, got ({mean}, {stddev})"
            )));
        }
        Ok(Self { mean, stddev })
    }

    pub fn from_variance(mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(invalid(format!("variance must be positive, got {variance}")));
        }
        Self::new(mean, variance.sqrt())
    }

    pub fn variance(&self) -> f64 {
        self.stddev * self.stddev
    }

    pub fn cdf(&self, y: f64) -> f64 {
        standard_normal_cdf((y - self.mean) / self.stddev)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.stddev * z
    }
}

/// A categorical distribution over `C ≥ 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs, SIMPLEX_TOLERANCE)?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.probs, rng)
    }
}

/// One component `p(y | x, θ)` of a mixture predictive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ComponentDistribution {
    Gaussian(Gaussian),
    Categorical(Categorical),
}

impl ComponentDistribution {
    fn kind(&self) -> &'static str {
        match self {
            ComponentDistribution::Gaussian(_) => "gaussian",
            ComponentDistribution::Categorical(_) => "categorical",
        }
    }
}

impl From<Gaussian> for ComponentDistribution {
    fn from(g: Gaussian) -> Self {
        ComponentDistribution::Gaussian(g)
    }
}

impl From<Categorical> for ComponentDistribution {
    fn from(c: Categorical) -> Self {
        ComponentDistribution::Categorical(c)
    }
}

/// A single draw from a predictive: a real target or a class index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Draw {
    Real(f64),
    Class(usize),
}

/// Posterior weights over a finite set of models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PosteriorWeights {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl PosteriorWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_simplex(&weights, SIMPLEX_TOLERANCE).map_err(|e| match e {
            Error::InvalidParameter(msg) => invalid(format!("posterior weights: {msg}")),
            other => other,
        })?;
        let cumulative = cumulative_sums(&weights);
        Ok(Self {
            weights,
            cumulative,
        })
    }

    /// Equal weight `1/m` on each of `m` models.
    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::EmptyInput("posterior weights"));
        }
        Self::new(vec![1.0 / m as f64; m])
    }

    /// All mass on model `index` of `m`.
    pub fn point_mass(index: usize, m: usize) -> Result<Self> {
        if index >= m {
            return Err(invalid(format!("model index {index} out of range for {m} models")));
        }
        let mut w = vec![0.0; m];
        w[index] = 1.0;
        Self::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Draws a model index. A single-model posterior consumes no randomness.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.weights.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        search_cumulative(&self.cumulative, &self.weights, u)
    }
}

impl TryFrom<Vec<f64>> for PosteriorWeights {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<PosteriorWeights> for Vec<f64> {
    fn from(value: PosteriorWeights) -> Self {
        value.weights
    }
}

/// A finite mixture `Σ_m w_m p(y | θ_m)` of components of one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePredictive {
    components: Vec<ComponentDistribution>,
    weights: PosteriorWeights,
}

impl MixturePredictive {
    pub fn new(
        components: Vec<ComponentDistribution>,
        weights: Option<PosteriorWeights>,
    ) -> Result<Self> {
        let first = components
            .first()
            .ok_or(Error::EmptyInput("mixture components"))?;
        for c in &components[1..] {
            match (first, c) {
                (ComponentDistribution::Gaussian(_), ComponentDistribution::Gaussian(_)) => {}
                (ComponentDistribution::Categorical(a), ComponentDistribution::Categorical(b)) => {
                    if a.num_classes() != b.num_classes() {
                        return Err(invalid(format!(
                            "categorical components disagree on class count ({} vs {})",
                            a.num_classes(),
                            b.num_classes()
                        )));
                    }
                }
                _ => {
                    return Err(Error::KindMismatch {
                        expected: first.kind(),
                        found: c.kind(),
                    })
                }
            }
        }
        let weights = match weights {
            Some(w) => w,
            None => PosteriorWeights::uniform(components.len())?,
        };
        if weights.len() != components.len() {
            return Err(Error::LengthMismatch {
                what: "mixture weights",
                expected: components.len(),
                found: weights.len(),
            });
        }
        Ok(Self {
            components,
            weights,
        })
    }

    /// Equal-weight mixture of Gaussians.
    pub fn gaussians(components: impl IntoIterator<Item = Gaussian>) -> Result<Self> {
        Self::new(
            components
                .into_iter()
                .map(ComponentDistribution::Gaussian)
                .collect(),
            None,
        )
    }

    pub fn components(&self) -> &[ComponentDistribution] {
        &self.components
    }

    pub fn weights(&self) -> &PosteriorWeights {
        &self.weights
    }
}

/// `Φ((y − mean) / stddev)`.
pub fn gaussian_cdf(mean: f64, stddev: f64, y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(invalid(format!("cdf argument must be finite, got {y}")));
    }
    Ok(Gaussian::new(mean, stddev)?.cdf(y))
}

/// CDF of a Gaussian mixture with `θ` integrated out.
pub fn mixture_cdf(mixture: &MixturePredictive, y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(invalid(format!("cdf argument must be finite, got {y}")));
    }
    let mut total = 0.0;
    for (c, w) in mixture.components.iter().zip(mixture.weights.as_slice()) {
        match c {
            ComponentDistribution::Gaussian(g) => total += w * g.cdf(y),
            ComponentDistribution::Categorical(_) => {
                return Err(Error::KindMismatch {
                    expected: "gaussian",
                    found: "categorical",
                })
            }
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Draws a component index from the weights, then a value from that component.
pub fn mixture_sample<R: Rng + ?Sized>(mixture: &MixturePredictive, rng: &mut R) -> Draw {
    let m = mixture.weights.sample_index(rng);
    match &mixture.components[m] {
        ComponentDistribution::Gaussian(g) => Draw::Real(g.sample(rng)),
        ComponentDistribution::Categorical(c) => Draw::Class(c.sample(rng)),
    }
}

/// Standard normal CDF. Accepts infinities.
pub(crate) fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// CDF of a weighted Gaussian mixture without validation.
pub(crate) fn weighted_gaussian_cdf(components: &[Gaussian], weights: &[f64], y: f64) -> f64 {
    let mut total = 0.0;
    for (g, w) in components.iter().zip(weights) {
        if *w != 0.0 {
            total += w * g.cdf(y);
        }
    }
    total.clamp(0.0, 1.0)
}

/// Inverse-CDF draw from a probability vector using one uniform variate.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = c;
            if u < acc {
                return c;
            }
        }
    }
    // u landed in the rounding gap above the accumulated mass.
    last_positive
}

fn search_cumulative(cumulative: &[f64], weights: &[f64], u: f64) -> usize {
    let idx = cumulative.partition_point(|&c| c <= u);
    if idx < weights.len() && weights[idx] > 0.0 {
        return idx;
    }
    // Rounding gap: fall back to the last model with positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn cumulative_sums(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

pub(crate) fn check_simplex(probs: &[f64], tolerance: f64) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("probability vector"));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid("probabilities must be finite and nonnegative"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tolerance {
        return Err(invalid(format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}
