//! Evaluation of probabilistic models with model uncertainty through
//! posterior predictive checks.
//!
//! Under model uncertainty the observed rows share one latent `θ`, so their
//! PIT values need not be uniform and calibration error need not vanish
//! even for a correct model. Instead of comparing a statistic against its
//! ideal value, this crate samples the statistic's distribution under the
//! model's own posterior predictive and reports where the observed value
//! falls (p-value) and how wide that distribution is (sharpness).

pub mod analytic;
pub mod error;
pub mod oracle;
pub mod ppc;
pub mod predictive;
pub mod recalibrate;
pub mod statistic;
pub mod statistics;

pub use error::{Error, Result};
pub use ppc::{
    p_value, replicate_labels, replicate_stream, run_ppc, run_ppc_with_samples, sample_statistic,
    sharpness, Percentiles, PpcReport, StatisticSamples, UncertaintyMode,
};
pub use predictive::{
    gaussian_cdf, mixture_cdf, mixture_sample, Categorical, ComponentDistribution, Draw, Gaussian,
    MixturePredictive, PosteriorWeights,
};
pub use statistic::{PreparedStatistic, TestStatistic};
pub use statistics::{
    ClassPredictions, EnsemblePredictions, Labels, RegressionPredictions,
};
