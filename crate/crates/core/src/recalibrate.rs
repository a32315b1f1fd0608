//! Per-model temperature scaling of classification ensembles.
//!
//! Each model `j` gets its own temperature `τ_j`; the fitted temperatures
//! maximise the mean log of the ensemble-averaged recalibrated probability
//! of the true label on a held-out recalibration slice:
//!
//! ```text
//! (1/|R|) Σ_{i∈R} log[(1/M) Σ_j softmax(z_ij / τ_j)[y_i]]
//! ```
//!
//! Optimisation is gradient ascent in `log τ` with a backtracking line
//! search, so temperatures stay positive and the result is deterministic.

use std::borrow::Cow;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::statistics::{softmax_scaled, ClassPredictions};

pub const DEFAULT_RECALIBRATION_FRACTION: f64 = 0.2;
const MAX_ITERATIONS: usize = 500;
const MIN_IMPROVEMENT: f64 = 1e-8;
const ARMIJO: f64 = 1e-4;

/// One positive temperature per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemperatureFile", into = "TemperatureFile")]
pub struct TemperatureVector(Vec<f64>);

#[derive(Serialize, Deserialize)]
struct TemperatureFile {
    temperatures: Vec<f64>,
}

impl TemperatureVector {
    pub fn new(temps: Vec<f64>) -> Result<Self> {
        if temps.is_empty() {
            return Err(Error::EmptyInput("temperatures"));
        }
        if let Some(t) = temps.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(invalid(format!("temperatures must be finite and positive, got {t}")));
        }
        Ok(Self(temps))
    }

    pub fn ones(models: usize) -> Self {
        Self(vec![1.0; models])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<TemperatureFile> for TemperatureVector {
    type Error = Error;

    fn try_from(value: TemperatureFile) -> Result<Self> {
        Self::new(value.temperatures)
    }
}

impl From<TemperatureVector> for TemperatureFile {
    fn from(value: TemperatureVector) -> Self {
        TemperatureFile {
            temperatures: value.0,
        }
    }
}

/// Row ranges of a recalibration/evaluation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRows {
    pub recalibration: Range<usize>,
    pub evaluation: Range<usize>,
}

/// The first `⌊N · fraction⌋` rows recalibrate; the rest evaluate.
pub fn split_rows(rows: usize, fraction: f64) -> Result<SplitRows> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let cut = (rows as f64 * fraction).floor() as usize;
    if cut == 0 {
        return Err(invalid(format!(
            "{rows} rows at fraction {fraction} leave no recalibration rows"
        )));
    }
    if cut >= rows {
        return Err(invalid(format!(
            "{rows} rows at fraction {fraction} leave no evaluation rows"
        )));
    }
    Ok(SplitRows {
        recalibration: 0..cut,
        evaluation: cut..rows,
    })
}

/// Predictions and labels restricted to a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSlice {
    pub rows: Range<usize>,
    pub predictions: ClassPredictions,
    pub labels: Vec<usize>,
}

/// Splits predictions and labels into (recalibration, evaluation) slices.
pub fn split_recalibration(
    preds: &ClassPredictions,
    labels: &[usize],
    fraction: f64,
) -> Result<(DataSlice, DataSlice)> {
    if labels.len() != preds.rows() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: preds.rows(),
            found: labels.len(),
        });
    }
    let split = split_rows(preds.rows(), fraction)?;
    let slice = |rows: Range<usize>| DataSlice {
        predictions: preds.select_rows(rows.clone()),
        labels: labels[rows.clone()].to_vec(),
        rows,
    };
    Ok((slice(split.recalibration), slice(split.evaluation)))
}

/// Logits of `preds`, or log-probabilities when explicitly allowed.
pub fn logits_of(preds: &ClassPredictions, allow_log_probs: bool) -> Result<Cow<'_, [f64]>> {
    match preds.logits() {
        Some(l) => Ok(Cow::Borrowed(l)),
        None if allow_log_probs => Ok(Cow::Owned(
            preds
                .flat_probs()
                .iter()
                .map(|p| p.max(f64::MIN_POSITIVE).ln())
                .collect(),
        )),
        None => Err(Error::Unsupported(
            "temperature scaling needs logits; probabilities were given without log-prob surrogate enabled"
                .into(),
        )),
    }
}

/// `softmax(z / τ_j)` for every row and model.
pub fn apply_temperatures(
    preds: &ClassPredictions,
    temps: &TemperatureVector,
    allow_log_probs: bool,
) -> Result<ClassPredictions> {
    check_models(preds, temps)?;
    let logits = logits_of(preds, allow_log_probs)?;
    let (m, c) = (preds.models(), preds.classes());
    let mut probs = vec![0.0; logits.len()];
    for (idx, (out, z)) in probs
        .chunks_exact_mut(c)
        .zip(logits.chunks_exact(c))
        .enumerate()
    {
        softmax_scaled(z, 1.0 / temps.as_slice()[idx % m], out);
    }
    ClassPredictions::from_probs(preds.rows(), m, c, probs)
}

/// Mean recalibration objective at the given temperatures.
pub fn recalibration_objective(
    preds: &ClassPredictions,
    labels: &[usize],
    temps: &TemperatureVector,
    allow_log_probs: bool,
) -> Result<f64> {
    check_models(preds, temps)?;
    check_labels(preds, labels)?;
    let logits = logits_of(preds, allow_log_probs)?;
    let problem = Problem::new(preds, &logits, labels);
    let log_t: Vec<f64> = temps.as_slice().iter().map(|t| t.ln()).collect();
    Ok(problem.objective_and_gradient(&log_t, None))
}

/// Fits per-model temperatures on the given (recalibration) rows.
pub fn fit_temperatures(
    preds: &ClassPredictions,
    labels: &[usize],
    allow_log_probs: bool,
) -> Result<TemperatureVector> {
    check_labels(preds, labels)?;
    let logits = logits_of(preds, allow_log_probs)?;
    let problem = Problem::new(preds, &logits, labels);
    let m = preds.models();

    let mut s = vec![0.0; m];
    let mut grad = vec![0.0; m];
    let mut value = problem.objective_and_gradient(&s, Some(&mut grad));
    let mut step = 1.0;
    let mut trial = vec![0.0; m];
    let mut trial_grad = vec![0.0; m];
    for _ in 0..MAX_ITERATIONS {
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        if grad_sq == 0.0 {
            break;
        }
        let accepted = loop {
            for j in 0..m {
                trial[j] = s[j] + step * grad[j];
            }
            let v = problem.objective_and_gradient(&trial, Some(&mut trial_grad));
            if v.is_finite() && v >= value + ARMIJO * step * grad_sq {
                break Some(v);
            }
            step *= 0.5;
            if step < 1e-14 {
                break None;
            }
        };
        let Some(new_value) = accepted else { break };
        let improvement = new_value - value;
        std::mem::swap(&mut s, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        value = new_value;
        step *= 2.0;
        if improvement < MIN_IMPROVEMENT {
            break;
        }
    }
    TemperatureVector::new(s.iter().map(|v| v.exp()).collect())
}

/// Mean negative log of the ensemble-averaged probability of the label.
pub fn ensemble_nll(preds: &ClassPredictions, labels: &[usize]) -> Result<f64> {
    check_labels(preds, labels)?;
    let m = preds.models() as f64;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let avg: f64 = (0..preds.models()).map(|j| preds.probs(i, j)[y]).sum::<f64>() / m;
            -avg.ln()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Per-model accuracy (argmax, ties to the lowest class).
pub fn model_accuracies(preds: &ClassPredictions, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(preds, labels)?;
    Ok((0..preds.models())
        .map(|j| {
            let hits = labels
                .iter()
                .enumerate()
                .filter(|(i, &y)| crate::statistics::argmax(preds.probs(*i, j)).0 == y)
                .count();
            hits as f64 / labels.len() as f64
        })
        .collect())
}

struct Problem<'a> {
    rows: usize,
    models: usize,
    classes: usize,
    logits: &'a [f64],
    labels: &'a [usize],
}

impl<'a> Problem<'a> {
    fn new(preds: &ClassPredictions, logits: &'a [f64], labels: &'a [usize]) -> Self {
        Self {
            rows: preds.rows(),
            models: preds.models(),
            classes: preds.classes(),
            logits,
            labels,
        }
    }

    /// Objective in log-temperature space; fills `grad` when given.
    fn objective_and_gradient(&self, log_t: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let (m, c) = (self.models, self.classes);
        let inv_t: Vec<f64> = log_t.iter().map(|s| (-s).exp()).collect();
        let mut grad_acc = vec![0.0; m];
        let mut log_q = vec![0.0; m];
        let mut slope = vec![0.0; m];
        let mut total = 0.0;
        for i in 0..self.rows {
            let y = self.labels[i];
            for j in 0..m {
                let z = &self.logits[(i * m + j) * c..(i * m + j + 1) * c];
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                // u = (z - max) / τ; shifting by max leaves the softmax unchanged.
                let mut norm = 0.0;
                let mut weighted = 0.0;
                for &zc in z {
                    let u = (zc - max) * inv_t[j];
                    let e = u.exp();
                    norm += e;
                    weighted += e * u;
                }
                let u_y = (z[y] - max) * inv_t[j];
                log_q[j] = u_y - norm.ln();
                // d log q / d log τ = E_p[u] - u_y.
                slope[j] = weighted / norm - u_y;
            }
            let top = log_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = log_q.iter().map(|l| (l - top).exp()).sum();
            let log_a = top + sum.ln();
            total += log_a - (m as f64).ln();
            if grad.is_some() {
                for j in 0..m {
                    grad_acc[j] += (log_q[j] - log_a).exp() * slope[j];
                }
            }
        }
        let n = self.rows as f64;
        if let Some(g) = grad.as_deref_mut() {
            for (out, acc) in g.iter_mut().zip(&grad_acc) {
                *out = acc / n;
            }
        }
        total / n
    }
}

fn check_models(preds: &ClassPredictions, temps: &TemperatureVector) -> Result<()> {
    if temps.len() != preds.models() {
        return Err(Error::LengthMismatch {
            what: "temperatures",
            expected: preds.models(),
            found: temps.len(),
        });
    }
    Ok(())
}

fn check_labels(preds: &ClassPredictions, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if labels.len() != preds.rows() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: preds.rows(),
            found: labels.len(),
        });
    }
    if let Some(i) = labels.iter().position(|&y| y >= preds.classes()) {
        return Err(invalid(format!("label on row {i} is out of range")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        let s = split_rows(10, 0.2).unwrap();
        assert_eq!(s.recalibration, 0..2);
        assert_eq!(s.evaluation, 2..10);
        let s = split_rows(5, 0.2).unwrap();
        assert_eq!(s.recalibration, 0..1);
        assert_eq!(s.evaluation, 1..5);
        assert!(split_rows(1, 0.2).is_err());
        assert!(split_rows(10, 0.0).is_err());
        assert!(split_rows(10, 1.0).is_err());
    }

    #[test]
    fn unit_temperature_is_identity() {
        let p = ClassPredictions::from_logits(1, 1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let out = apply_temperatures(&p, &TemperatureVector::ones(1), false).unwrap();
        for (a, b) in out.probs(0, 0).iter().zip(p.probs(0, 0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hot_temperature_flattens() {
        let p = ClassPredictions::from_logits(1, 1, 2, vec![2.0, 0.0]).unwrap();
        let out =
            apply_temperatures(&p, &TemperatureVector::new(vec![1e4]).unwrap(), false).unwrap();
        assert!((out.probs(0, 0)[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn cold_temperature_sharpens() {
        let p = ClassPredictions::from_logits(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let out =
            apply_temperatures(&p, &TemperatureVector::new(vec![0.5]).unwrap(), false).unwrap();
        let sigma2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((out.probs(0, 0)[0] - sigma2).abs() < 1e-12);
        assert!((out.probs(0, 0)[0] - 0.8808).abs() < 1e-4);
        assert!((out.probs(0, 0)[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn temperatures_must_be_positive() {
        assert!(TemperatureVector::new(vec![1.0, 0.0]).is_err());
        assert!(TemperatureVector::new(vec![-1.0]).is_err());
        assert!(TemperatureVector::new(vec![f64::NAN]).is_err());
        assert!(TemperatureVector::new(vec![]).is_err());
    }

    #[test]
    fn probabilities_need_explicit_flag() {
        let p = ClassPredictions::from_probs(2, 1, 2, vec![0.7, 0.3, 0.2, 0.8]).unwrap();
        assert!(matches!(
            fit_temperatures(&p, &[0, 1], false),
            Err(Error::Unsupported(_))
        ));
        assert!(fit_temperatures(&p, &[0, 1], true).is_ok());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let logits = vec![
            1.0, -0.5, 0.2, 0.3, 0.1, -2.0, //
            -1.0, 2.0, 0.5, 0.0, 1.5, -0.3, //
            0.7, 0.7, -0.7, 2.2, -1.1, 0.4,
        ];
        let p = ClassPredictions::from_logits(3, 2, 3, logits.clone()).unwrap();
        let labels = [0, 1, 2];
        let problem = Problem::new(&p, &logits, &labels);
        let s = [0.3, -0.4];
        let mut g = [0.0; 2];
        problem.objective_and_gradient(&s, Some(&mut g));
        let h = 1e-6;
        for j in 0..2 {
            let mut plus = s;
            let mut minus = s;
            plus[j] += h;
            minus[j] -= h;
            let fd = (problem.objective_and_gradient(&plus, None)
                - problem.objective_and_gradient(&minus, None))
                / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8, "j={j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn fitted_objective_never_below_unit_temperatures() {
        let logits = vec![3.0, 0.0, -3.0, 0.0, 0.0, 3.0, 1.0, 1.0, 4.0, 0.0];
        let p = ClassPredictions::from_logits(5, 1, 2, logits).unwrap();
        let labels = [1, 1, 0, 0, 1];
        let fitted = fit_temperatures(&p, &labels, false).unwrap();
        let at_fit = recalibration_objective(&p, &labels, &fitted, false).unwrap();
        let at_one = recalibration_objective(&p, &labels, &TemperatureVector::ones(1), false).unwrap();
        assert!(at_fit >= at_one);
    }
}
