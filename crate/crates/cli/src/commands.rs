//! Subcommand definitions and their implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ppc_uq_core::analytic::{
    bayesian_linear_ensemble, conjugate_posterior, generate_quadratic_dataset, location_ensemble,
    location_labels, marginal_predictions, posterior_predictive, BayesianLinearEnsembleConfig,
    ConjugateNormalModel, NormalPosterior, QuadraticDatasetConfig,
};
use ppc_uq_core::oracle::{exact_statistic_distribution, EnumerationBudget, StatisticPmf};
use ppc_uq_core::recalibrate::{
    apply_temperatures, ensemble_nll, fit_temperatures, split_recalibration,
    DEFAULT_RECALIBRATION_FRACTION,
};
use ppc_uq_core::{
    run_ppc, EnsemblePredictions, Labels, PosteriorWeights, RegressionPredictions, TestStatistic,
    UncertaintyMode,
};
use serde::Serialize;
use thiserror::Error;

use crate::io::{self, InputDigests, IoError, ReportFile};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Core(#[from] ppc_uq_core::Error),
    #[error("usage: {0}")]
    Usage(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Result of a command that completed without error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

#[derive(Debug, Parser)]
#[command(name = "ppc-uq", version, about = "Posterior predictive checks for models with uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a posterior predictive check of observed labels.
    Check(CheckArgs),
    /// Fit per-model temperatures on a held-out slice.
    Recalibrate(RecalibrateArgs),
    /// Generate synthetic datasets and ensembles.
    Simulate(SimulateArgs),
    /// Exact distribution of a statistic on a tiny classification problem.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatisticName {
    Ece,
    Calibration,
    Picp,
    Accuracy,
}

#[derive(Debug, Clone, Args)]
pub struct StatisticArgs {
    #[arg(long, value_enum)]
    pub statistic: StatisticName,
    /// bayesian, independent or point:IDX
    #[arg(long, default_value = "bayesian")]
    pub mode: UncertaintyMode,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    #[arg(long, default_value_t = 100)]
    pub quantiles: usize,
    #[arg(long, default_value_t = 0.025)]
    pub picp_low: f64,
    #[arg(long, default_value_t = 0.975)]
    pub picp_high: f64,
}

impl StatisticArgs {
    pub fn statistic(&self) -> CliResult<TestStatistic> {
        Ok(match self.statistic {
            StatisticName::Ece => TestStatistic::ece(self.bins)?,
            StatisticName::Calibration => TestStatistic::calibration_error(self.quantiles)?,
            StatisticName::Picp => TestStatistic::picp(self.picp_low, self.picp_high)?,
            StatisticName::Accuracy => TestStatistic::Accuracy,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub stat: StatisticArgs,
    #[arg(long, default_value_t = ppc_uq_core::ppc::DEFAULT_REPLICATIONS)]
    pub replications: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RecalibrateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RECALIBRATION_FRACTION)]
    pub fraction: f64,
    #[arg(long)]
    pub out_temps: PathBuf,
    /// Recalibrated predictions for the evaluation rows only.
    #[arg(long)]
    pub out_predictions: PathBuf,
    /// Labels of the evaluation rows.
    #[arg(long)]
    pub out_labels: Option<PathBuf>,
    /// Treat log-probabilities as logits when the file holds probabilities.
    #[arg(long)]
    pub allow_log_probs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    Location,
    Quadratic,
    Conjugate,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rows (location), training points (quadratic) or observations (conjugate).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Ensemble size; 1000 for location, 50 for quadratic.
    #[arg(long)]
    pub models: Option<usize>,
    /// True location of the data (location and conjugate).
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub prior_mean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub prior_var: f64,
    /// Noise variance; 1 for location and conjugate, 0.5 for quadratic.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Read --noise as a standard deviation (quadratic).
    #[arg(long)]
    pub noise_is_std: bool,
    /// Explicit observations for the conjugate scenario.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub data: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
    #[arg(long, default_value_t = 1.0)]
    pub prior_precision: f64,
    #[arg(long, default_value_t = 1000)]
    pub test_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub ood_size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Observed labels; adds the observed value and exact p-value.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[command(flatten)]
    pub stat: StatisticArgs,
    #[arg(long, default_value_t = EnumerationBudget::default().0)]
    pub budget: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(command: &Command) -> CliResult<(Outcome, String)> {
    match command {
        Command::Check(args) => check(args),
        Command::Recalibrate(args) => recalibrate(args).map(|s| (Outcome::Success, s)),
        Command::Simulate(args) => simulate(args).map(|s| (Outcome::Success, s)),
        Command::Oracle(args) => oracle(args).map(|s| (Outcome::Success, s)),
    }
}

fn load_pair(predictions: &Path, labels_path: &Path) -> CliResult<(EnsemblePredictions, Labels)> {
    let (header, preds) = io::read_predictions(predictions)?;
    let labels = io::read_labels(labels_path, header.kind())?;
    if labels.len() != preds.rows() {
        return Err(CliError::Usage(format!(
            "{} has {} labels but {} declares {} rows",
            labels_path.display(),
            labels.len(),
            predictions.display(),
            preds.rows()
        )));
    }
    Ok((preds, labels))
}

fn check_kind(stat: &TestStatistic, preds: &EnsemblePredictions) -> CliResult<()> {
    stat.check_compatible(preds)
        .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn check(args: &CheckArgs) -> CliResult<(Outcome, String)> {
    let statistic = args.stat.statistic()?;
    let (preds, labels) = load_pair(&args.predictions, &args.labels)?;
    check_kind(&statistic, &preds)?;
    let weights = PosteriorWeights::uniform(preds.models())?;
    let report = run_ppc(
        &preds,
        &weights,
        &labels,
        &statistic,
        args.stat.mode,
        args.replications,
        args.seed,
    )?;
    let mut summary = String::new();
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    let _ = writeln!(summary, "{verdict}: {} under {} mode", report.statistic, report.mode);
    let _ = writeln!(summary, "  observed   {:.6}", report.observed);
    let _ = writeln!(summary, "  p-value    {:.6}", report.p_value);
    let _ = writeln!(summary, "  sharpness  {:.6}", report.sharpness);
    let pc = report.percentiles;
    let _ = writeln!(
        summary,
        "  percentiles 5/25/50/75/95: {:.6} {:.6} {:.6} {:.6} {:.6}",
        pc.p5, pc.p25, pc.p50, pc.p75, pc.p95
    );
    let outcome = if report.passed {
        Outcome::Success
    } else {
        Outcome::CheckFailed
    };
    if let Some(out) = &args.out {
        let inputs = InputDigests {
            predictions: io::file_digest(&args.predictions)?,
            labels: io::file_digest(&args.labels)?,
        };
        io::write_json(out, &ReportFile::new(report, inputs))?;
        let _ = writeln!(summary, "  report     {}", out.display());
    }
    Ok((outcome, summary))
}

pub fn recalibrate(args: &RecalibrateArgs) -> CliResult<String> {
    let (preds, labels) = load_pair(&args.predictions, &args.labels)?;
    let preds = preds
        .as_classification()
        .map_err(|_| CliError::Usage("recalibration needs classification predictions".into()))?;
    let labels = labels.as_classes()?;
    let (fit_slice, eval_slice) = split_recalibration(preds, labels, args.fraction)?;
    let temps = fit_temperatures(&fit_slice.predictions, &fit_slice.labels, args.allow_log_probs)?;
    let recalibrated = apply_temperatures(&eval_slice.predictions, &temps, args.allow_log_probs)?;
    let nll_before = ensemble_nll(&eval_slice.predictions, &eval_slice.labels)?;
    let nll_after = ensemble_nll(&recalibrated, &eval_slice.labels)?;

    io::write_json(&args.out_temps, &temps)?;
    io::write_predictions(&args.out_predictions, &recalibrated.into())?;
    if let Some(path) = &args.out_labels {
        io::write_labels(path, &Labels::Classes(eval_slice.labels.clone()))?;
    }
    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "fitted {} temperatures on rows {}..{}",
        temps.len(),
        fit_slice.rows.start,
        fit_slice.rows.end
    );
    let shown: Vec<String> = temps.as_slice().iter().map(|t| format!("{t:.4}")).collect();
    let _ = writeln!(summary, "  temperatures {}", shown.join(" "));
    let _ = writeln!(
        summary,
        "  evaluation rows {}..{}: ensemble NLL {nll_before:.6} -> {nll_after:.6}",
        eval_slice.rows.start, eval_slice.rows.end
    );
    Ok(summary)
}

#[derive(Serialize)]
struct ConjugateSummary {
    observations: usize,
    posterior: NormalPosterior,
    predictive_mean: f64,
    predictive_variance: f64,
}

pub fn simulate(args: &SimulateArgs) -> CliResult<String> {
    std::fs::create_dir_all(&args.out_dir).map_err(|source| IoError::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    let dir = &args.out_dir;
    let mut summary = String::new();
    match args.scenario {
        Scenario::Location => {
            let rows = args.n.unwrap_or(1000);
            let models = args.models.unwrap_or(1000);
            let noise = args.noise.unwrap_or(1.0);
            let prior = NormalPosterior {
                mean: args.prior_mean,
                variance: args.prior_var,
            };
            let labels = location_labels(args.theta, noise, rows, args.seed)?;
            let ensemble = location_ensemble(prior, noise, models, rows, args.seed)?;
            let marginal = marginal_predictions(prior, noise, rows)?;
            io::write_predictions(&dir.join("predictions.jsonl"), &ensemble.into())?;
            io::write_predictions(&dir.join("marginal.jsonl"), &marginal.into())?;
            io::write_labels(&dir.join("labels.csv"), &Labels::Targets(labels))?;
            let _ = writeln!(
                summary,
                "location: {rows} rows, {models}-model ensemble and marginal predictive"
            );
        }
        Scenario::Quadratic => {
            let mut cfg = QuadraticDatasetConfig {
                test_size: args.test_size,
                ood_size: args.ood_size,
                noise_is_std: args.noise_is_std,
                seed: args.seed,
                ..Default::default()
            };
            if let Some(n) = args.n {
                cfg.train_size = n;
            }
            if let Some(noise) = args.noise {
                cfg.noise = noise;
            }
            let data = generate_quadratic_dataset(&cfg)?;
            let ens = BayesianLinearEnsembleConfig {
                degree: args.degree,
                prior_precision: args.prior_precision,
                prior_mean: None,
                noise_variance: cfg.noise_variance(),
                models: args.models.unwrap_or(50),
                seed: args.seed,
            };
            write_xy(&dir.join("train.csv"), &data.train.x, &data.train.y)?;
            for (name, split) in [("test", &data.test), ("ood", &data.ood)] {
                let preds = bayesian_linear_ensemble(&ens, &data.train.x, &data.train.y, &split.x)?;
                io::write_predictions(&dir.join(format!("{name}.jsonl")), &preds.into())?;
                io::write_labels(
                    &dir.join(format!("{name}_labels.csv")),
                    &Labels::Targets(split.y.clone()),
                )?;
                write_xy(&dir.join(format!("{name}_inputs.csv")), &split.x, &split.y)?;
            }
            let _ = writeln!(
                summary,
                "quadratic: {} training points, {} test and {} ood rows, {} models",
                cfg.train_size, cfg.test_size, cfg.ood_size, ens.models
            );
        }
        Scenario::Conjugate => {
            let noise = args.noise.unwrap_or(1.0);
            let data = match &args.data {
                Some(d) => d.clone(),
                None => location_labels(args.theta, noise, args.n.unwrap_or(1), args.seed)?,
            };
            let model = ConjugateNormalModel::new(args.prior_mean, args.prior_var, noise)?;
            let posterior = conjugate_posterior(&model, &data)?;
            let predictive = posterior_predictive(posterior.mean, posterior.variance, noise)?;
            let preds = RegressionPredictions::new(1, 1, vec![predictive])?;
            io::write_predictions(&dir.join("predictive.jsonl"), &preds.into())?;
            io::write_json(
                &dir.join("posterior.json"),
                &ConjugateSummary {
                    observations: data.len(),
                    posterior,
                    predictive_mean: predictive.mean,
                    predictive_variance: predictive.variance(),
                },
            )?;
            let _ = writeln!(
                summary,
                "conjugate: posterior N({}, {}), predictive N({}, {})",
                posterior.mean,
                posterior.variance,
                predictive.mean,
                predictive.variance()
            );
        }
    }
    Ok(summary)
}

fn write_xy(path: &Path, x: &[f64], y: &[f64]) -> CliResult<()> {
    io::atomic_write(path, |out| {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| IoError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        };
        w.write_record(["x", "y"]).map_err(to_err)?;
        for (a, b) in x.iter().zip(y) {
            w.write_record([a.to_string(), b.to_string()]).map_err(to_err)?;
        }
        w.flush().map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    Ok(())
}

#[derive(Serialize)]
struct OracleOutput {
    statistic: TestStatistic,
    mode: UncertaintyMode,
    #[serde(flatten)]
    pmf: StatisticPmf,
    #[serde(skip_serializing_if = "Option::is_none")]
    observed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_value: Option<f64>,
}

pub fn oracle(args: &OracleArgs) -> CliResult<String> {
    let statistic = args.stat.statistic()?;
    let (header, preds) = io::read_predictions(&args.predictions)?;
    check_kind(&statistic, &preds)?;
    let weights = PosteriorWeights::uniform(preds.models())?;
    let pmf = exact_statistic_distribution(
        &preds,
        &weights,
        &statistic,
        args.stat.mode,
        EnumerationBudget(args.budget),
    )?;
    let (observed, p_value) = match &args.labels {
        Some(path) => {
            let labels = io::read_labels(path, header.kind())?;
            labels.validate_for(&preds)?;
            let effective = args.stat.mode.effective_weights(&weights, preds.models())?;
            let value = statistic.evaluate(&preds, &effective, &labels)?;
            let below: f64 = pmf
                .atoms
                .iter()
                .filter(|a| a.value < value)
                .map(|a| a.mass)
                .sum();
            (Some(value), Some(below))
        }
        None => (None, None),
    };
    let output = OracleOutput {
        statistic,
        mode: args.stat.mode,
        pmf,
        observed,
        p_value,
    };
    let text = serde_json::to_string_pretty(&output).map_err(IoError::from)?;
    if let Some(out) = &args.out {
        io::write_json(out, &output)?;
    }
    Ok(text + "\n")
}
