use ppc_uq_core::analytic::{
    bayesian_linear_ensemble, conjugate_posterior, generate_quadratic_dataset, location_labels,
    quadratic_mean, BayesianLinearEnsembleConfig, ConjugateNormalModel, QuadraticDatasetConfig,
};
use ppc_uq_core::{
    run_ppc, sample_statistic, EnsemblePredictions, Gaussian, Labels, PosteriorWeights,
    TestStatistic, UncertaintyMode,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn large_sample_posterior_concentrates_on_truth() {
    let data = location_labels(0.5, 1.0, 10_000, 4).unwrap();
    let model = ConjugateNormalModel::new(0.0, 1.0, 1.0).unwrap();
    let post = conjugate_posterior(&model, &data).unwrap();
    assert!((post.mean - 0.5).abs() < 0.03);
    assert!((post.variance - 1e-4).abs() < 1e-6);
}

#[test]
fn quadratic_noise_moments_at_fixed_input() {
    let cfg = QuadraticDatasetConfig::default();
    let g = Gaussian::from_variance(quadratic_mean(1.0), cfg.noise_variance()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ys: Vec<f64> = (0..10_000).map(|_| g.sample(&mut rng)).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
    assert!(mean.abs() < 0.03, "{mean}");
    assert!((var - 0.5).abs() < 0.03, "{var}");
}

#[test]
fn in_distribution_check_passes_for_most_seeds() {
    let stat = TestStatistic::calibration_error(100).unwrap();
    let mut passed = 0;
    for seed in 0..20u64 {
        let cfg = QuadraticDatasetConfig {
            train_size: 100,
            test_size: 500,
            seed,
            ..Default::default()
        };
        let data = generate_quadratic_dataset(&cfg).unwrap();
        let ens = BayesianLinearEnsembleConfig {
            models: 50,
            seed,
            ..Default::default()
        };
        let preds: EnsemblePredictions =
            bayesian_linear_ensemble(&ens, &data.train.x, &data.train.y, &data.test.x)
                .unwrap()
                .into();
        let w = PosteriorWeights::uniform(50).unwrap();
        let labels = Labels::Targets(data.test.y);
        let report = run_ppc(&preds, &w, &labels, &stat, UncertaintyMode::Bayesian, 500, seed).unwrap();
        passed += report.passed as usize;
    }
    assert!(passed >= 18, "{passed}/20");
}

#[test]
fn pinned_prior_makes_modes_coincide() {
    let data = generate_quadratic_dataset(&QuadraticDatasetConfig {
        train_size: 50,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let ens = BayesianLinearEnsembleConfig {
        prior_precision: f64::INFINITY,
        prior_mean: Some(vec![1.0, -2.0, 1.0, 0.0]),
        models: 8,
        seed: 1,
        ..Default::default()
    };
    let preds: EnsemblePredictions =
        bayesian_linear_ensemble(&ens, &data.train.x, &data.train.y, &data.ood.x[..200])
            .unwrap()
            .into();
    let w = PosteriorWeights::uniform(8).unwrap();
    let stat = TestStatistic::calibration_error(50).unwrap();
    let bayes = sample_statistic(&preds, &w, &stat, UncertaintyMode::Bayesian, 2000, 3).unwrap();
    let indep =
        sample_statistic(&preds, &w, &stat, UncertaintyMode::ConditionallyIndependent, 2000, 3)
            .unwrap();
    // Identical models: the index draws differ but every label law is the same.
    let mut a = bayes.samples.clone();
    let mut b = indep.samples.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let ks = a
        .iter()
        .map(|x| {
            let fa = a.partition_point(|v| v <= x) as f64 / a.len() as f64;
            let fb = b.partition_point(|v| v <= x) as f64 / b.len() as f64;
            (fa - fb).abs()
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.07, "{ks}");
}
