//! Closed-form generative models and synthetic datasets.
//!
//! - The conjugate normal-mean model with known noise, whose posterior
//!   predictive is `N(μ, σ² + τ²)`.
//! - The location example: `θ ~ N(0, 1)`, `y_i ~ N(θ, 1)`, so each `y_i` is
//!   marginally `N(0, 2)` while the rows share `θ`.
//! - A 1-D regression task `y ~ N((x − 1)², 0.5)` with a held-out input
//!   interval, fitted by exact Bayesian linear regression on a polynomial
//!   basis. Posterior weight draws play the role of ensemble members.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::predictive::{gaussian_cdf, Gaussian};
use crate::statistics::RegressionPredictions;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Normal mean with a normal prior and known noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugateNormalModel {
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub noise_variance: f64,
}

impl ConjugateNormalModel {
    pub fn new(prior_mean: f64, prior_variance: f64, noise_variance: f64) -> Result<Self> {
        if !prior_mean.is_finite() {
            return Err(invalid("prior mean must be finite"));
        }
        if !(prior_variance > 0.0 && prior_variance.is_finite()) {
            return Err(invalid("prior variance must be positive"));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(invalid("noise variance must be positive"));
        }
        Ok(Self {
            prior_mean,
            prior_variance,
            noise_variance,
        })
    }
}

/// Posterior over the mean, `θ ~ N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPosterior {
    pub mean: f64,
    pub variance: f64,
}

/// Conjugate update of the mean given observations.
pub fn conjugate_posterior(model: &ConjugateNormalModel, data: &[f64]) -> Result<NormalPosterior> {
    if data.is_empty() {
        return Err(Error::EmptyInput("observations"));
    }
    let n = data.len() as f64;
    let sum: f64 = data.iter().sum();
    let precision = 1.0 / model.prior_variance + n / model.noise_variance;
    let variance = 1.0 / precision;
    let mean = variance * (model.prior_mean / model.prior_variance + sum / model.noise_variance);
    Ok(NormalPosterior { mean, variance })
}

/// Posterior predictive `N(μ, σ² + τ²)`.
pub fn posterior_predictive(mean: f64, posterior_variance: f64, noise_variance: f64) -> Result<Gaussian> {
    if !(posterior_variance >= 0.0) || !(noise_variance > 0.0) {
        return Err(invalid(format!(
            "variances must be nonnegative (posterior) and positive (noise), got {posterior_variance}, {noise_variance}"
        )));
    }
    Gaussian::from_variance(mean, noise_variance + posterior_variance)
}

/// Empirical and analytic `P(F(y) < 0.5)` for the location example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocationDemo {
    pub empirical_frac: f64,
    pub analytic_frac: f64,
}

/// Draws `y_i ~ N(θ_true, 1)` and evaluates them under the `N(0, 2)` marginal.
pub fn location_example_demo(theta_true: f64, n: usize, seed: u64) -> Result<LocationDemo> {
    if n == 0 {
        return Err(Error::EmptyInput("location sample size"));
    }
    let marginal_sd = 2f64.sqrt();
    let ys = location_labels(theta_true, 1.0, n, seed)?;
    let mut below = 0usize;
    for y in &ys {
        if gaussian_cdf(0.0, marginal_sd, *y)? < 0.5 {
            below += 1;
        }
    }
    Ok(LocationDemo {
        empirical_frac: below as f64 / n as f64,
        analytic_frac: gaussian_cdf(theta_true, 1.0, 0.0)?,
    })
}

/// `n` draws from `N(θ_true, noise_variance)`.
pub fn location_labels(theta_true: f64, noise_variance: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let g = Gaussian::from_variance(theta_true, noise_variance)?;
    let mut rng = stream(seed, 0);
    Ok((0..n).map(|_| g.sample(&mut rng)).collect())
}

/// Ensemble of `models` posterior draws `θ_m ~ N(μ, τ²)`, each predicting
/// `N(θ_m, σ²)` on every one of `rows` rows.
pub fn location_ensemble(
    posterior: NormalPosterior,
    noise_variance: f64,
    models: usize,
    rows: usize,
    seed: u64,
) -> Result<RegressionPredictions> {
    if models == 0 || rows == 0 {
        return Err(Error::EmptyInput("location ensemble"));
    }
    let noise_sd = noise_sd(noise_variance)?;
    let prior_sd = posterior.variance.max(0.0).sqrt();
    let mut rng = stream(seed, 1);
    let draws: Vec<Gaussian> = (0..models)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            Gaussian::new(posterior.mean + prior_sd * z, noise_sd)
        })
        .collect::<Result<_>>()?;
    let mut params = Vec::with_capacity(rows * models);
    for _ in 0..rows {
        params.extend_from_slice(&draws);
    }
    RegressionPredictions::new(rows, models, params)
}

/// Single-model predictive `N(μ, σ² + τ²)` on every row.
pub fn marginal_predictions(
    posterior: NormalPosterior,
    noise_variance: f64,
    rows: usize,
) -> Result<RegressionPredictions> {
    let g = posterior_predictive(posterior.mean, posterior.variance, noise_variance)?;
    RegressionPredictions::new(rows, 1, vec![g; rows])
}

fn noise_sd(noise_variance: f64) -> Result<f64> {
    if !(noise_variance > 0.0 && noise_variance.is_finite()) {
        return Err(invalid("noise variance must be positive"));
    }
    Ok(noise_variance.sqrt())
}

/// Settings for the quadratic regression task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticDatasetConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub ood_size: usize,
    /// Inputs in this closed interval never appear in training data.
    pub holdout: (f64, f64),
    /// Noise level; a variance unless `noise_is_std` is set.
    pub noise: f64,
    pub noise_is_std: bool,
    pub seed: u64,
}

impl Default for QuadraticDatasetConfig {
    fn default() -> Self {
        Self {
            train_size: 10_000,
            test_size: 1000,
            ood_size: 1000,
            holdout: (-1.5, 0.0),
            noise: 0.5,
            noise_is_std: false,
            seed: 0,
        }
    }
}

impl QuadraticDatasetConfig {
    pub fn noise_variance(&self) -> f64 {
        if self.noise_is_std {
            self.noise * self.noise
        } else {
            self.noise
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train_size == 0 {
            return Err(invalid("training size must be at least 1"));
        }
        let (a, b) = self.holdout;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(invalid(format!("holdout interval [{a}, {b}] is not ordered")));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(invalid("noise must be positive"));
        }
        Ok(())
    }
}

/// Inputs and targets of one split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Samples {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticDataset {
    pub train: Samples,
    /// Drawn like the training data.
    pub test: Samples,
    /// Inputs uniform on the held-out interval.
    pub ood: Samples,
}

/// Mean of the quadratic task, `(x − 1)²`.
pub fn quadratic_mean(x: f64) -> f64 {
    (x - 1.0).powi(2)
}

/// Draws train, test and out-of-distribution splits.
pub fn generate_quadratic_dataset(cfg: &QuadraticDatasetConfig) -> Result<QuadraticDataset> {
    cfg.validate()?;
    let sd = cfg.noise_variance().sqrt();
    let (a, b) = cfg.holdout;
    let in_distribution = |rng: &mut ChaCha8Rng, n: usize| {
        let mut s = Samples::default();
        while s.x.len() < n {
            let x: f64 = rng.sample(StandardNormal);
            if (a..=b).contains(&x) {
                continue;
            }
            let noise: f64 = rng.sample(StandardNormal);
            s.x.push(x);
            s.y.push(quadratic_mean(x) + sd * noise);
        }
        s
    };
    let train = in_distribution(&mut stream(cfg.seed, 10), cfg.train_size);
    let test = in_distribution(&mut stream(cfg.seed, 11), cfg.test_size);
    let mut rng = stream(cfg.seed, 12);
    let mut ood = Samples::default();
    for _ in 0..cfg.ood_size {
        let x = rng.random_range(a..b);
        let noise: f64 = rng.sample(StandardNormal);
        ood.x.push(x);
        ood.y.push(quadratic_mean(x) + sd * noise);
    }
    Ok(QuadraticDataset { train, test, ood })
}

/// `count` evenly spaced points strictly inside `(a, b)`.
pub fn interior_grid(interval: (f64, f64), count: usize) -> Vec<f64> {
    let (a, b) = interval;
    (1..=count)
        .map(|i| a + (b - a) * i as f64 / (count + 1) as f64)
        .collect()
}

/// Settings for exact Bayesian linear regression on a polynomial basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianLinearEnsembleConfig {
    /// Basis `1, x, …, x^degree`.
    pub degree: usize,
    /// Isotropic prior precision on the weights; `inf` pins them to the prior mean.
    pub prior_precision: f64,
    /// Prior mean of the weights; zero when absent.
    pub prior_mean: Option<Vec<f64>>,
    pub noise_variance: f64,
    pub models: usize,
    pub seed: u64,
}

impl Default for BayesianLinearEnsembleConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            prior_precision: 1.0,
            prior_mean: None,
            noise_variance: 0.5,
            models: 50,
            seed: 0,
        }
    }
}

/// Gaussian posterior over basis weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPosterior {
    pub degree: usize,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub noise_variance: f64,
}

fn features(x: f64, degree: usize) -> DVector<f64> {
    DVector::from_iterator(degree + 1, (0..=degree).map(|k| x.powi(k as i32)))
}

/// Exact posterior `N(m, S)` with `S⁻¹ = αI + ΦᵀΦ/σ²` and `m = S(α m₀ + Φᵀy/σ²)`.
pub fn fit_linear_posterior(
    cfg: &BayesianLinearEnsembleConfig,
    x: &[f64],
    y: &[f64],
) -> Result<LinearPosterior> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            what: "training targets",
            expected: x.len(),
            found: y.len(),
        });
    }
    if !(cfg.prior_precision > 0.0) {
        return Err(invalid("prior precision must be positive"));
    }
    if !(cfg.noise_variance > 0.0 && cfg.noise_variance.is_finite()) {
        return Err(invalid("noise variance must be positive"));
    }
    let d = cfg.degree + 1;
    let prior_mean = match &cfg.prior_mean {
        Some(m) if m.len() != d => {
            return Err(Error::LengthMismatch {
                what: "prior mean",
                expected: d,
                found: m.len(),
            })
        }
        Some(m) => DVector::from_column_slice(m),
        None => DVector::zeros(d),
    };
    if cfg.prior_precision.is_infinite() {
        return Ok(LinearPosterior {
            degree: cfg.degree,
            mean: prior_mean,
            covariance: DMatrix::zeros(d, d),
            noise_variance: cfg.noise_variance,
        });
    }
    let mut precision = DMatrix::identity(d, d) * cfg.prior_precision;
    let mut rhs = &prior_mean * cfg.prior_precision;
    for (&xi, &yi) in x.iter().zip(y) {
        let phi = features(xi, cfg.degree);
        precision += &phi * phi.transpose() / cfg.noise_variance;
        rhs += &phi * (yi / cfg.noise_variance);
    }
    let chol = precision
        .cholesky()
        .ok_or_else(|| invalid("posterior precision is not positive definite"))?;
    let mean = chol.solve(&rhs);
    let covariance = chol.inverse();
    Ok(LinearPosterior {
        degree: cfg.degree,
        mean,
        covariance,
        noise_variance: cfg.noise_variance,
    })
}

impl LinearPosterior {
    /// `count` independent weight vectors drawn from the posterior.
    pub fn draw_weights(&self, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        let d = self.mean.len();
        let factor = if self.covariance.iter().all(|v| *v == 0.0) {
            DMatrix::zeros(d, d)
        } else {
            // Symmetrise against round-off before factoring.
            let sym = (&self.covariance + self.covariance.transpose()) * 0.5;
            sym.cholesky()
                .ok_or_else(|| invalid("posterior covariance is not positive definite"))?
                .l()
        };
        let mut rng = stream(seed, 20);
        Ok((0..count)
            .map(|_| {
                let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
                &self.mean + &factor * z
            })
            .collect())
    }

    /// Posterior mean and standard deviation of the regression function at `x`.
    pub fn function_moments(&self, x: f64) -> (f64, f64) {
        let phi = features(x, self.degree);
        let mean = phi.dot(&self.mean);
        let var = (phi.transpose() * &self.covariance * &phi)[(0, 0)];
        (mean, var.max(0.0).sqrt())
    }
}

/// Fits the posterior and evaluates `cfg.models` weight draws on `query`.
///
/// Row `i`, model `m` is `N(w_mᵀφ(x_i), σ²)`.
pub fn bayesian_linear_ensemble(
    cfg: &BayesianLinearEnsembleConfig,
    train_x: &[f64],
    train_y: &[f64],
    query: &[f64],
) -> Result<RegressionPredictions> {
    if cfg.models == 0 {
        return Err(invalid("ensemble needs at least one model"));
    }
    if query.is_empty() {
        return Err(Error::EmptyInput("query points"));
    }
    let posterior = fit_linear_posterior(cfg, train_x, train_y)?;
    let draws = posterior.draw_weights(cfg.models, cfg.seed)?;
    let sd = cfg.noise_variance.sqrt();
    let mut params = Vec::with_capacity(query.len() * cfg.models);
    for &x in query {
        let phi = features(x, cfg.degree);
        for w in &draws {
            params.push(Gaussian::new(phi.dot(w), sd)?);
        }
    }
    RegressionPredictions::new(query.len(), cfg.models, params)
}
