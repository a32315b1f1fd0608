//! Test statistics `T(y, model)` bound to a fixed predictive.
//!
//! A [`TestStatistic`] names what to compute. A [`PreparedStatistic`] binds
//! it to one set of predictions and posterior weights so that it can be
//! evaluated cheaply on many label vectors: the observed labels and every
//! replicated data set of a posterior predictive check.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictive::{weighted_gaussian_cdf, PosteriorWeights};
use crate::statistics::{
    self, check_weights, ece_from_bins, integrated_class_probs, BinningConfig, EnsemblePredictions,
    Labels, PicpBounds, QuantileSet, RegressionPredictions,
};

/// A statistic of labels and the posterior-integrated predictive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TestStatistic {
    Ece { bins: BinningConfig },
    CalibrationError { quantiles: QuantileSet },
    Picp { bounds: PicpBounds },
    Accuracy,
}

impl TestStatistic {
    pub fn ece(num_bins: usize) -> Result<Self> {
        Ok(TestStatistic::Ece {
            bins: BinningConfig::new(num_bins)?,
        })
    }

    pub fn calibration_error(num_quantiles: usize) -> Result<Self> {
        Ok(TestStatistic::CalibrationError {
            quantiles: QuantileSet::evenly_spaced(num_quantiles)?,
        })
    }

    pub fn picp(lower: f64, upper: f64) -> Result<Self> {
        Ok(TestStatistic::Picp {
            bounds: PicpBounds::new(lower, upper)?,
        })
    }

    /// Prediction kind this statistic applies to.
    pub fn kind(&self) -> &'static str {
        match self {
            TestStatistic::Ece { .. } | TestStatistic::Accuracy => "classification",
            TestStatistic::CalibrationError { .. } | TestStatistic::Picp { .. } => "regression",
        }
    }

    pub fn check_compatible(&self, preds: &EnsemblePredictions) -> Result<()> {
        if self.kind() != preds.kind() {
            return Err(Error::KindMismatch {
                expected: self.kind(),
                found: preds.kind(),
            });
        }
        Ok(())
    }

    /// Evaluates the statistic directly through the metric functions.
    pub fn evaluate(
        &self,
        preds: &EnsemblePredictions,
        weights: &PosteriorWeights,
        labels: &Labels,
    ) -> Result<f64> {
        self.check_compatible(preds)?;
        labels.validate_for(preds)?;
        match self {
            TestStatistic::Ece { bins } => {
                let probs = integrated_class_probs(preds, weights)?;
                statistics::ece(&probs, labels.as_classes()?, bins)
            }
            TestStatistic::Accuracy => {
                let probs = integrated_class_probs(preds, weights)?;
                statistics::accuracy(&probs, labels.as_classes()?)
            }
            TestStatistic::CalibrationError { quantiles } => {
                let pit = statistics::pit_values(preds, weights, labels.as_targets()?)?;
                statistics::calibration_error(&pit, quantiles)
            }
            TestStatistic::Picp { bounds } => {
                let pit = statistics::pit_values(preds, weights, labels.as_targets()?)?;
                statistics::picp(&pit, bounds)
            }
        }
    }
}

impl fmt::Display for TestStatistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestStatistic::Ece { bins } => write!(f, "ece(bins={})", bins.num_bins),
            TestStatistic::CalibrationError { quantiles } => {
                write!(f, "calibration_error(quantiles={})", quantiles.levels().len())
            }
            TestStatistic::Picp { bounds } => {
                write!(f, "picp([{}, {}])", bounds.lower, bounds.upper)
            }
            TestStatistic::Accuracy => write!(f, "accuracy"),
        }
    }
}

/// A statistic bound to one predictive, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PreparedStatistic<'a> {
    rows: usize,
    inner: Prepared<'a>,
}

#[derive(Debug, Clone)]
enum Prepared<'a> {
    Classification {
        predicted: Vec<usize>,
        confidence: Vec<f64>,
        bin: Vec<usize>,
        num_bins: Option<usize>,
    },
    Regression {
        route: PitRoute<'a>,
        target: PitTarget,
    },
}

#[derive(Debug, Clone)]
enum PitTarget {
    Calibration(QuantileSet),
    Picp(PicpBounds),
}

impl PitTarget {
    fn levels(&self) -> Vec<f64> {
        match self {
            PitTarget::Calibration(q) => q.levels().to_vec(),
            PitTarget::Picp(b) => vec![b.lower, b.upper],
        }
    }
}

/// How PIT comparisons are evaluated for one replicate.
#[derive(Debug, Clone)]
enum PitRoute<'a> {
    /// Evaluate the mixture CDF of every row on every call.
    Direct {
        preds: &'a RegressionPredictions,
        weights: Vec<f64>,
    },
    /// Compare targets against precomputed CDF crossing points.
    ///
    /// For a monotone CDF `F`, `F(y) < p` exactly when `y` sorts below the
    /// smallest double `t` with `F(t) ≥ p`. Rows with identical predictives
    /// share one threshold table.
    Thresholds {
        group: Vec<u32>,
        // For calibration: one key per quantile level, `F(t) >= p_j`.
        // For PICP: `[first F >= lower, first F > upper]`.
        tables: Vec<Vec<u64>>,
    },
}

impl<'a> PreparedStatistic<'a> {
    /// Binds `statistic` to `preds` with the given weights.
    ///
    /// `evaluations` is the expected number of [`evaluate`](Self::evaluate)
    /// calls; it only decides which internal evaluation route is cheaper.
    pub fn new(
        statistic: &TestStatistic,
        preds: &'a EnsemblePredictions,
        weights: &PosteriorWeights,
        evaluations: usize,
    ) -> Result<Self> {
        statistic.check_compatible(preds)?;
        check_weights(weights, preds.models())?;
        let rows = preds.rows();
        let inner = match statistic {
            TestStatistic::Ece { .. } | TestStatistic::Accuracy => {
                let probs = integrated_class_probs(preds, weights)?;
                let (predicted, confidence): (Vec<usize>, Vec<f64>) =
                    (0..rows).map(|i| probs.argmax(i)).unzip();
                let (bin, num_bins) = match statistic {
                    TestStatistic::Ece { bins } => (
                        confidence.iter().map(|&c| bins.bin_of(c)).collect(),
                        Some(bins.num_bins),
                    ),
                    _ => (Vec::new(), None),
                };
                Prepared::Classification {
                    predicted,
                    confidence,
                    bin,
                    num_bins,
                }
            }
            TestStatistic::CalibrationError { quantiles } => {
                let target = PitTarget::Calibration(quantiles.clone());
                Prepared::Regression {
                    route: PitRoute::choose(preds.as_regression()?, weights, &target, evaluations),
                    target,
                }
            }
            TestStatistic::Picp { bounds } => {
                let target = PitTarget::Picp(*bounds);
                Prepared::Regression {
                    route: PitRoute::choose(preds.as_regression()?, weights, &target, evaluations),
                    target,
                }
            }
        };
        Ok(Self { rows, inner })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `T(labels, predictive)`.
    pub fn evaluate(&self, labels: &Labels) -> Result<f64> {
        if labels.len() != self.rows {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: self.rows,
                found: labels.len(),
            });
        }
        match &self.inner {
            Prepared::Classification {
                predicted,
                confidence,
                bin,
                num_bins,
            } => {
                let classes = labels.as_classes()?;
                match num_bins {
                    None => {
                        let hits = classes
                            .iter()
                            .zip(predicted)
                            .filter(|(y, p)| y == p)
                            .count();
                        Ok(hits as f64 / self.rows as f64)
                    }
                    Some(b) => {
                        let mut count = vec![0usize; *b];
                        let mut correct = vec![0usize; *b];
                        let mut conf_sum = vec![0.0; *b];
                        for i in 0..self.rows {
                            let k = bin[i];
                            count[k] += 1;
                            conf_sum[k] += confidence[i];
                            if classes[i] == predicted[i] {
                                correct[k] += 1;
                            }
                        }
                        Ok(ece_from_bins(&count, &correct, &conf_sum, self.rows))
                    }
                }
            }
            Prepared::Regression { route, target } => {
                let targets = labels.as_targets()?;
                Ok(route.evaluate(target, targets))
            }
        }
    }

    /// True when PIT comparisons run against precomputed thresholds.
    pub fn uses_thresholds(&self) -> bool {
        matches!(
            self.inner,
            Prepared::Regression {
                route: PitRoute::Thresholds { .. },
                ..
            }
        )
    }
}

impl<'a> PitRoute<'a> {
    fn choose(
        preds: &'a RegressionPredictions,
        weights: &PosteriorWeights,
        target: &PitTarget,
        evaluations: usize,
    ) -> Self {
        let w = weights.as_slice().to_vec();
        let direct = PitRoute::Direct { preds, weights: w };
        if evaluations <= 1 {
            return direct;
        }
        let (group, uniques) = group_identical_rows(preds, weights.as_slice());
        let levels = target.levels();
        // Each threshold costs about 64 CDF evaluations; the direct route
        // pays one CDF evaluation per row per call.
        let threshold_cost = uniques.len() as f64 * levels.len() as f64 * 66.0;
        let direct_cost = evaluations as f64 * preds.rows() as f64;
        if threshold_cost >= direct_cost {
            return direct;
        }
        let weights = weights.as_slice();
        let tables = uniques
            .iter()
            .map(|&row| {
                let comps = preds.row(row);
                let cdf = |y: f64| weighted_gaussian_cdf(comps, weights, y);
                match target {
                    PitTarget::Calibration(q) => q
                        .levels()
                        .iter()
                        .map(|&p| first_key_where(|y| cdf(y) >= p))
                        .collect(),
                    PitTarget::Picp(b) => vec![
                        first_key_where(|y| cdf(y) >= b.lower),
                        first_key_where(|y| cdf(y) > b.upper),
                    ],
                }
            })
            .collect();
        PitRoute::Thresholds { group, tables }
    }

    fn evaluate(&self, target: &PitTarget, targets: &[f64]) -> f64 {
        let n = targets.len() as f64;
        match target {
            PitTarget::Calibration(q) => {
                let levels = q.levels();
                // hist[k]: rows with F >= p_j exactly for j < k.
                let mut hist = vec![0usize; levels.len() + 1];
                match self {
                    PitRoute::Direct { preds, weights } => {
                        for (i, &y) in targets.iter().enumerate() {
                            let f = weighted_gaussian_cdf(preds.row(i), weights, y);
                            hist[levels.partition_point(|&p| p <= f)] += 1;
                        }
                    }
                    PitRoute::Thresholds { group, tables } => {
                        for (i, &y) in targets.iter().enumerate() {
                            let key = order_key(y);
                            let table = &tables[group[i] as usize];
                            hist[table.partition_point(|&t| t <= key)] += 1;
                        }
                    }
                }
                let mut below = 0usize;
                let mut total = 0.0;
                for (j, &p) in levels.iter().enumerate() {
                    below += hist[j];
                    total += (p - below as f64 / n).powi(2);
                }
                total
            }
            PitTarget::Picp(bounds) => {
                let inside = match self {
                    PitRoute::Direct { preds, weights } => targets
                        .iter()
                        .enumerate()
                        .filter(|(i, &y)| {
                            bounds.contains(weighted_gaussian_cdf(preds.row(*i), weights, y))
                        })
                        .count(),
                    PitRoute::Thresholds { group, tables } => targets
                        .iter()
                        .enumerate()
                        .filter(|(i, &y)| {
                            let key = order_key(y);
                            let table = &tables[group[*i] as usize];
                            key >= table[0] && key < table[1]
                        })
                        .count(),
                };
                inside as f64 / n
            }
        }
    }
}

/// Maps rows to groups of bit-identical predictives.
fn group_identical_rows(preds: &RegressionPredictions, weights: &[f64]) -> (Vec<u32>, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut uniques = Vec::new();
    let mut group = Vec::with_capacity(preds.rows());
    for i in 0..preds.rows() {
        let key: Vec<u64> = preds
            .row(i)
            .iter()
            .zip(weights)
            .filter(|(_, w)| **w != 0.0)
            .flat_map(|(g, _)| [g.mean.to_bits(), g.stddev.to_bits()])
            .collect();
        let next = uniques.len() as u32;
        let id = *seen.entry(key).or_insert_with(|| {
            uniques.push(i);
            next
        });
        group.push(id);
    }
    (group, uniques)
}

/// Total-order key of a double; `-inf < … < -0.0 < +0.0 < … < +inf`.
pub(crate) fn order_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

fn from_order_key(key: u64) -> f64 {
    if key >> 63 == 1 {
        f64::from_bits(key & !(1 << 63))
    } else {
        f64::from_bits(!key)
    }
}

/// Smallest key in `[-inf, +inf]` whose double satisfies a monotone
/// predicate; one past `+inf` when none does.
fn first_key_where(pred: impl Fn(f64) -> bool) -> u64 {
    let mut lo = order_key(f64::NEG_INFINITY);
    let hi = order_key(f64::INFINITY);
    if pred(f64::NEG_INFINITY) {
        return lo;
    }
    if !pred(f64::INFINITY) {
        return hi + 1;
    }
    let mut hi = hi;
    // Invariant: pred(lo) is false, pred(hi) is true.
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if pred(from_order_key(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}
