//! Exact distribution of a test statistic on tiny classification problems.
//!
//! Every joint label vector in `Cᴺ` is enumerated with its probability under
//! the chosen uncertainty mode, and probability mass is aggregated by the
//! statistic value. This is ground truth for the Monte Carlo sampler in
//! [`crate::ppc`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ppc::UncertaintyMode;
use crate::predictive::PosteriorWeights;
use crate::statistic::{PreparedStatistic, TestStatistic};
use crate::statistics::{check_weights, ClassPredictions, EnsemblePredictions, Labels};

/// Values closer than this are merged into one PMF atom.
pub const MERGE_TOLERANCE: f64 = 1e-12;

/// Cap on the number of joint outcomes enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationBudget(pub u64);

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self(1_000_000)
    }
}

/// A finite probability mass function over statistic values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticPmf {
    pub atoms: Vec<PmfAtom>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmfAtom {
    pub value: f64,
    pub mass: f64,
}

impl StatisticPmf {
    /// Aggregates `(value, mass)` pairs, merging values within tolerance.
    pub fn from_weighted(mut pairs: Vec<(f64, f64)>) -> Self {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut atoms: Vec<PmfAtom> = Vec::new();
        for (value, mass) in pairs {
            match atoms.last_mut() {
                Some(last) if (value - last.value).abs() <= MERGE_TOLERANCE => last.mass += mass,
                _ => atoms.push(PmfAtom { value, mass }),
            }
        }
        Self { atoms }
    }

    /// Empirical PMF of Monte Carlo samples.
    pub fn empirical(samples: &[f64]) -> Self {
        let w = 1.0 / samples.len() as f64;
        Self::from_weighted(samples.iter().map(|&s| (s, w)).collect())
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    /// Mass at `value` (within the merge tolerance).
    pub fn mass_at(&self, value: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|a| (a.value - value).abs() <= MERGE_TOLERANCE)
            .map(|a| a.mass)
            .sum()
    }

    /// Total variation distance `½ Σ |p − q|` over the union of supports.
    pub fn total_variation(&self, other: &StatisticPmf) -> f64 {
        let mut pairs: Vec<(f64, f64)> = self.atoms.iter().map(|a| (a.value, a.mass)).collect();
        pairs.extend(other.atoms.iter().map(|a| (a.value, -a.mass)));
        let signed = StatisticPmf::from_weighted(pairs);
        0.5 * signed.atoms.iter().map(|a| a.mass.abs()).sum::<f64>()
    }
}

/// Number of joint outcomes the enumeration must visit.
pub fn required_outcomes(preds: &ClassPredictions, mode: UncertaintyMode) -> u128 {
    let c = preds.classes() as u128;
    let joint = c
        .checked_pow(preds.rows() as u32)
        .unwrap_or(u128::MAX);
    match mode {
        UncertaintyMode::Bayesian => joint.saturating_mul(preds.models() as u128),
        // Rows are independent given the per-row mixture.
        UncertaintyMode::ConditionallyIndependent | UncertaintyMode::PointEstimate(_) => joint,
    }
}

/// Exact PMF of `statistic` over replicated labels.
pub fn exact_statistic_distribution(
    preds: &EnsemblePredictions,
    weights: &PosteriorWeights,
    statistic: &TestStatistic,
    mode: UncertaintyMode,
    budget: EnumerationBudget,
) -> Result<StatisticPmf> {
    let class_preds = preds.as_classification().map_err(|_| {
        Error::Unsupported("exact enumeration covers classification predictions only".into())
    })?;
    check_weights(weights, class_preds.models())?;
    if let UncertaintyMode::PointEstimate(m) = mode {
        if m >= class_preds.models() {
            return Err(invalid(format!("point estimate index {m} out of range")));
        }
    }
    let required = required_outcomes(class_preds, mode);
    if required > budget.0 as u128 {
        return Err(Error::BudgetExceeded {
            required,
            budget: budget.0,
        });
    }
    let effective = mode.effective_weights(weights, class_preds.models())?;
    let prepared = PreparedStatistic::new(statistic, preds, &effective, 1)?;

    let (n, m, c) = (class_preds.rows(), class_preds.models(), class_preds.classes());
    // Per-row label laws under the mode (independent and point modes factorise).
    let row_law = |i: usize, y: usize| -> f64 {
        match mode {
            UncertaintyMode::PointEstimate(j) => class_preds.probs(i, j)[y],
            _ => (0..m)
                .map(|j| weights.as_slice()[j] * class_preds.probs(i, j)[y])
                .sum(),
        }
    };

    let mut pairs = Vec::new();
    let mut labels = vec![0usize; n];
    loop {
        let mass = match mode {
            UncertaintyMode::Bayesian => (0..m)
                .map(|j| {
                    weights.as_slice()[j]
                        * labels
                            .iter()
                            .enumerate()
                            .map(|(i, &y)| class_preds.probs(i, j)[y])
                            .product::<f64>()
                })
                .sum(),
            _ => labels
                .iter()
                .enumerate()
                .map(|(i, &y)| row_law(i, y))
                .product(),
        };
        if mass > 0.0 {
            let value = prepared.evaluate(&Labels::Classes(labels.clone()))?;
            pairs.push((value, mass));
        }
        if !advance(&mut labels, c) {
            break;
        }
    }
    Ok(StatisticPmf::from_weighted(pairs))
}

/// Odometer increment over `Cᴺ`; false after the last vector.
fn advance(labels: &mut [usize], classes: usize) -> bool {
    for digit in labels.iter_mut().rev() {
        *digit += 1;
        if *digit < classes {
            return true;
        }
        *digit = 0;
    }
    false
}
