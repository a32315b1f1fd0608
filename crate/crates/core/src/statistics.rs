//! Prediction containers and the calibration-style test statistics.
//!
//! Every statistic here is a pure function of labels and the
//! posterior-integrated predictive: ECE and accuracy for classification,
//! quantile calibration error and PICP on PIT values for regression.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::predictive::{check_simplex, weighted_gaussian_cdf, Gaussian, PosteriorWeights};

/// Tolerance on per-row per-model probability vectors.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Per-row, per-model class probabilities, stored row-major as `[N][M][C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPredictions {
    rows: usize,
    models: usize,
    classes: usize,
    probs: Vec<f64>,
    logits: Option<Vec<f64>>,
}

impl ClassPredictions {
    pub fn from_probs(rows: usize, models: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        check_shape(rows, models, classes, probs.len())?;
        for (idx, chunk) in probs.chunks_exact(classes).enumerate() {
            check_simplex(chunk, ROW_SUM_TOLERANCE).map_err(|e| {
                invalid(format!("row {} model {}: {e}", idx / models, idx % models))
            })?;
        }
        Ok(Self {
            rows,
            models,
            classes,
            probs,
            logits: None,
        })
    }

    /// Builds predictions from logits; probabilities are their softmax.
    pub fn from_logits(
        rows: usize,
        models: usize,
        classes: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        check_shape(rows, models, classes, logits.len())?;
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(invalid("logits must be finite"));
        }
        let mut probs = vec![0.0; logits.len()];
        for (out, z) in probs.chunks_exact_mut(classes).zip(logits.chunks_exact(classes)) {
            softmax_scaled(z, 1.0, out);
        }
        Ok(Self {
            rows,
            models,
            classes,
            probs,
            logits: Some(logits),
        })
    }

    /// Convenience constructor from nested `[N][M][C]` vectors.
    pub fn from_nested(probs: &[Vec<Vec<f64>>]) -> Result<Self> {
        let (rows, models, classes, flat) = flatten_nested(probs)?;
        Self::from_probs(rows, models, classes, flat)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn models(&self) -> usize {
        self.models
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `p(· | x_row, θ_model)`.
    pub fn probs(&self, row: usize, model: usize) -> &[f64] {
        let start = (row * self.models + model) * self.classes;
        &self.probs[start..start + self.classes]
    }

    /// All models' probabilities for one row, `[M][C]` flattened.
    pub fn row(&self, row: usize) -> &[f64] {
        let width = self.models * self.classes;
        &self.probs[row * width..(row + 1) * width]
    }

    pub fn flat_probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    /// Keeps only `rows`, in order.
    pub fn select_rows(&self, rows: std::ops::Range<usize>) -> Self {
        let width = self.models * self.classes;
        let span = rows.start * width..rows.end * width;
        Self {
            rows: rows.len(),
            models: self.models,
            classes: self.classes,
            probs: self.probs[span.clone()].to_vec(),
            logits: self.logits.as_ref().map(|l| l[span].to_vec()),
        }
    }
}

/// Per-row, per-model Gaussian predictives stored row-major as `[N][M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPredictions {
    rows: usize,
    models: usize,
    params: Vec<Gaussian>,
}

impl RegressionPredictions {
    pub fn new(rows: usize, models: usize, params: Vec<Gaussian>) -> Result<Self> {
        check_shape(rows, models, 1, params.len())?;
        for (idx, g) in params.iter().enumerate() {
            if !g.mean.is_finite() || !g.stddev.is_finite() || g.stddev <= 0.0 {
                return Err(invalid(format!(
                    "row {} model {}: stddev must be positive and finite",
                    idx / models,
                    idx % models
                )));
            }
        }
        Ok(Self {
            rows,
            models,
            params,
        })
    }

    pub fn from_nested(rows: &[Vec<Gaussian>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != m) {
            return Err(Error::LengthMismatch {
                what: "models in row",
                expected: m,
                found: rows[bad].len(),
            });
        }
        Self::new(n, m, rows.iter().flatten().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn models(&self) -> usize {
        self.models
    }

    /// All model predictives for one row.
    pub fn row(&self, row: usize) -> &[Gaussian] {
        &self.params[row * self.models..(row + 1) * self.models]
    }

    pub fn get(&self, row: usize, model: usize) -> Gaussian {
        self.params[row * self.models + model]
    }

    pub fn select_rows(&self, rows: std::ops::Range<usize>) -> Self {
        Self {
            rows: rows.len(),
            models: self.models,
            params: self.params[rows.start * self.models..rows.end * self.models].to_vec(),
        }
    }
}

/// Predictions of an ensemble (or any finite posterior) on `N` rows.
#[derive(Debug, Clone, PartialEq)]
pub enum EnsemblePredictions {
    Classification(ClassPredictions),
    Regression(RegressionPredictions),
}

impl EnsemblePredictions {
    pub fn rows(&self) -> usize {
        match self {
            EnsemblePredictions::Classification(c) => c.rows(),
            EnsemblePredictions::Regression(r) => r.rows(),
        }
    }

    pub fn models(&self) -> usize {
        match self {
            EnsemblePredictions::Classification(c) => c.models(),
            EnsemblePredictions::Regression(r) => r.models(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EnsemblePredictions::Classification(_) => "classification",
            EnsemblePredictions::Regression(_) => "regression",
        }
    }

    pub fn as_classification(&self) -> Result<&ClassPredictions> {
        match self {
            EnsemblePredictions::Classification(c) => Ok(c),
            EnsemblePredictions::Regression(_) => Err(Error::KindMismatch {
                expected: "classification",
                found: "regression",
            }),
        }
    }

    pub fn as_regression(&self) -> Result<&RegressionPredictions> {
        match self {
            EnsemblePredictions::Regression(r) => Ok(r),
            EnsemblePredictions::Classification(_) => Err(Error::KindMismatch {
                expected: "regression",
                found: "classification",
            }),
        }
    }
}

impl From<ClassPredictions> for EnsemblePredictions {
    fn from(value: ClassPredictions) -> Self {
        EnsemblePredictions::Classification(value)
    }
}

impl From<RegressionPredictions> for EnsemblePredictions {
    fn from(value: RegressionPredictions) -> Self {
        EnsemblePredictions::Regression(value)
    }
}

/// Observed (or replicated) labels for `N` rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Targets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Labels::Classes(_) => "classification",
            Labels::Targets(_) => "regression",
        }
    }

    pub fn as_classes(&self) -> Result<&[usize]> {
        match self {
            Labels::Classes(c) => Ok(c),
            Labels::Targets(_) => Err(Error::KindMismatch {
                expected: "classification",
                found: "regression",
            }),
        }
    }

    pub fn as_targets(&self) -> Result<&[f64]> {
        match self {
            Labels::Targets(t) => Ok(t),
            Labels::Classes(_) => Err(Error::KindMismatch {
                expected: "regression",
                found: "classification",
            }),
        }
    }

    /// Checks length and range against a prediction set.
    pub fn validate_for(&self, preds: &EnsemblePredictions) -> Result<()> {
        if self.len() != preds.rows() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: preds.rows(),
                found: self.len(),
            });
        }
        match (self, preds) {
            (Labels::Classes(c), EnsemblePredictions::Classification(p)) => {
                if let Some(i) = c.iter().position(|&y| y >= p.classes()) {
                    return Err(invalid(format!(
                        "label {} on row {i} is out of range for {} classes",
                        c[i],
                        p.classes()
                    )));
                }
                Ok(())
            }
            (Labels::Targets(t), EnsemblePredictions::Regression(_)) => {
                if let Some(i) = t.iter().position(|y| !y.is_finite()) {
                    return Err(invalid(format!("target on row {i} is not finite")));
                }
                Ok(())
            }
            _ => Err(Error::KindMismatch {
                expected: preds.kind(),
                found: self.kind(),
            }),
        }
    }

    pub fn select_rows(&self, rows: std::ops::Range<usize>) -> Self {
        match self {
            Labels::Classes(c) => Labels::Classes(c[rows].to_vec()),
            Labels::Targets(t) => Labels::Targets(t[rows].to_vec()),
        }
    }
}

/// Equal-width confidence bins `((m−1)/B, m/B]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub num_bins: usize,
}

impl BinningConfig {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(invalid("number of bins must be at least 1"));
        }
        Ok(Self { num_bins })
    }

    /// Index of the bin whose half-open interval contains `confidence`.
    pub fn bin_of(&self, confidence: f64) -> usize {
        let b = self.num_bins;
        let bf = b as f64;
        let mut idx = ((confidence * bf).ceil() as isize - 1).clamp(0, b as isize - 1) as usize;
        // Correct for rounding in confidence * B so that edges are exact.
        while idx > 0 && confidence <= idx as f64 / bf {
            idx -= 1;
        }
        while idx + 1 < b && confidence > (idx + 1) as f64 / bf {
            idx += 1;
        }
        idx
    }
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self { num_bins: 15 }
    }
}

/// Strictly increasing quantile levels in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileSet {
    levels: Vec<f64>,
}

impl QuantileSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::EmptyInput("quantile levels"));
        }
        if levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(invalid("quantile levels must lie in (0, 1)"));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("quantile levels must be strictly increasing"));
        }
        Ok(Self { levels })
    }

    /// `j / (count + 1)` for `j = 1..=count`.
    pub fn evenly_spaced(count: usize) -> Result<Self> {
        let denom = (count + 1) as f64;
        Self::new((1..=count).map(|j| j as f64 / denom).collect())
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Largest attainable calibration error, `Σ_j max(p_j, 1 − p_j)²`.
    pub fn max_calibration_error(&self) -> f64 {
        self.levels.iter().map(|p| p.max(1.0 - p).powi(2)).sum()
    }
}

impl Default for QuantileSet {
    fn default() -> Self {
        Self::evenly_spaced(100).expect("default quantile set is valid")
    }
}

impl TryFrom<Vec<f64>> for QuantileSet {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<QuantileSet> for Vec<f64> {
    fn from(value: QuantileSet) -> Self {
        value.levels
    }
}

/// Posterior-averaged class probabilities, `[N][C]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ClassProbabilities {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if classes < 2 {
            return Err(invalid("at least two classes are required"));
        }
        let mut data = Vec::with_capacity(rows.len() * classes);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != classes {
                return Err(Error::LengthMismatch {
                    what: "class probabilities",
                    expected: classes,
                    found: r.len(),
                });
            }
            check_simplex(r, ROW_SUM_TOLERANCE).map_err(|e| invalid(format!("row {i}: {e}")))?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            classes,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Predicted class and its probability; ties go to the lowest index.
    pub fn argmax(&self, i: usize) -> (usize, f64) {
        argmax(self.row(i))
    }
}

pub(crate) fn argmax(probs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = c;
        }
    }
    (best, probs[best])
}

/// Row `i` gets `Σ_m w_m · probs[i][m][·]`.
pub fn integrated_class_probs(
    preds: &EnsemblePredictions,
    weights: &PosteriorWeights,
) -> Result<ClassProbabilities> {
    let preds = preds.as_classification()?;
    check_weights(weights, preds.models())?;
    let (n, m, c) = (preds.rows(), preds.models(), preds.classes());
    let mut data = vec![0.0; n * c];
    for (i, out) in data.chunks_exact_mut(c).enumerate() {
        for (model, &w) in weights.as_slice().iter().enumerate().take(m) {
            if w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(preds.probs(i, model)) {
                *o += w * p;
            }
        }
    }
    Ok(ClassProbabilities {
        rows: n,
        classes: c,
        data,
    })
}

/// Expected calibration error with absolute per-bin gaps.
pub fn ece(probs: &ClassProbabilities, labels: &[usize], bins: &BinningConfig) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::EmptyInput("ece rows"));
    }
    check_len("labels", probs.rows(), labels.len())?;
    let mut count = vec![0usize; bins.num_bins];
    let mut correct = vec![0usize; bins.num_bins];
    let mut conf_sum = vec![0.0; bins.num_bins];
    for (i, &y) in labels.iter().enumerate() {
        let (pred, conf) = probs.argmax(i);
        let b = bins.bin_of(conf);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    Ok(ece_from_bins(&count, &correct, &conf_sum, labels.len()))
}

pub(crate) fn ece_from_bins(count: &[usize], correct: &[usize], conf_sum: &[f64], n: usize) -> f64 {
    let n = n as f64;
    let mut total = 0.0;
    for b in 0..count.len() {
        if count[b] == 0 {
            continue;
        }
        let size = count[b] as f64;
        let acc = correct[b] as f64 / size;
        let conf = conf_sum[b] / size;
        total += size / n * (acc - conf).abs();
    }
    total
}

/// Fraction of rows whose predicted class equals the label.
pub fn accuracy(probs: &ClassProbabilities, labels: &[usize]) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::EmptyInput("accuracy rows"));
    }
    check_len("labels", probs.rows(), labels.len())?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| probs.argmax(*i).0 == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Posterior-integrated CDF of each observed target.
pub fn pit_values(
    preds: &EnsemblePredictions,
    weights: &PosteriorWeights,
    targets: &[f64],
) -> Result<Vec<f64>> {
    let preds = preds.as_regression()?;
    check_weights(weights, preds.models())?;
    check_len("targets", preds.rows(), targets.len())?;
    targets
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if !y.is_finite() {
                return Err(invalid(format!("target on row {i} is not finite")));
            }
            Ok(weighted_gaussian_cdf(preds.row(i), weights.as_slice(), y))
        })
        .collect()
}

/// `Σ_j (p_j − p̂_j)²` with `p̂_j = |{F_i < p_j}| / N`.
pub fn calibration_error(pit: &[f64], quantiles: &QuantileSet) -> Result<f64> {
    if pit.is_empty() {
        return Err(Error::EmptyInput("pit values"));
    }
    if pit.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(invalid("pit values must lie in [0, 1]"));
    }
    let mut sorted = pit.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(quantiles
        .levels()
        .iter()
        .map(|&p| {
            let below = sorted.partition_point(|&f| f < p) as f64;
            (p - below / n).powi(2)
        })
        .sum())
}

/// Inclusive central-interval bounds for PICP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicpBounds {
    pub lower: f64,
    pub upper: f64,
}

impl PicpBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower >= upper {
            return Err(invalid(format!(
                "picp bounds must satisfy 0 <= lower < upper <= 1, got [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, f: f64) -> bool {
        self.lower <= f && f <= self.upper
    }
}

impl Default for PicpBounds {
    fn default() -> Self {
        Self {
            lower: 0.025,
            upper: 0.975,
        }
    }
}

/// Fraction of PIT values inside `[lower, upper]`.
pub fn picp(pit: &[f64], bounds: &PicpBounds) -> Result<f64> {
    if pit.is_empty() {
        return Err(Error::EmptyInput("pit values"));
    }
    PicpBounds::new(bounds.lower, bounds.upper)?;
    let inside = pit.iter().filter(|&&f| bounds.contains(f)).count();
    Ok(inside as f64 / pit.len() as f64)
}

/// One-sample Kolmogorov–Smirnov statistic against Uniform(0, 1).
pub fn ks_uniform(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("ks sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let u = u.clamp(0.0, 1.0);
            let above = (i + 1) as f64 / n - u;
            let below = u - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max))
}

pub(crate) fn softmax_scaled(logits: &[f64], inv_temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) * inv_temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn check_weights(weights: &PosteriorWeights, models: usize) -> Result<()> {
    check_len("posterior weights", models, weights.len())
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::LengthMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_shape(rows: usize, models: usize, classes: usize, len: usize) -> Result<()> {
    if rows == 0 {
        return Err(Error::EmptyInput("prediction rows"));
    }
    if models == 0 {
        return Err(Error::EmptyInput("prediction models"));
    }
    if classes == 0 {
        return Err(invalid("class count must be positive"));
    }
    check_len("prediction values", rows * models * classes, len)
}

fn flatten_nested(probs: &[Vec<Vec<f64>>]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let rows = probs.len();
    let models = probs.first().map_or(0, Vec::len);
    let classes = probs
        .first()
        .and_then(|r| r.first())
        .map_or(0, Vec::len);
    if classes == 1 {
        return Err(invalid("at least two classes are required"));
    }
    let mut flat = Vec::with_capacity(rows * models * classes);
    for row in probs {
        if row.len() != models {
            return Err(Error::LengthMismatch {
                what: "models in row",
                expected: models,
                found: row.len(),
            });
        }
        for p in row {
            if p.len() != classes {
                return Err(Error::LengthMismatch {
                    what: "classes in row",
                    expected: classes,
                    found: p.len(),
                });
            }
            flat.extend_from_slice(p);
        }
    }
    Ok((rows, models, classes, flat))
}
