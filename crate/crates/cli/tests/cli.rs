use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ppc_uq_cli::io::{
    read_json, read_labels, read_predictions, write_json, write_labels, write_predictions,
    InputDigests, ReportFile,
};
use ppc_uq_core::recalibrate::ensemble_nll;
use ppc_uq_core::{
    run_ppc, ClassPredictions, EnsemblePredictions, Gaussian, Labels, PosteriorWeights,
    RegressionPredictions, TestStatistic, UncertaintyMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ppc-uq"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn one_hot_pair(dir: &Path, labels: &[usize]) -> (PathBuf, PathBuf) {
    let row = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let preds = ClassPredictions::from_nested(&[row.clone(), row]).unwrap();
    let pred_path = dir.join("pair.jsonl");
    let label_path = dir.join("pair.csv");
    write_predictions(&pred_path, &preds.into()).unwrap();
    write_labels(&label_path, &Labels::Classes(labels.to_vec())).unwrap();
    (pred_path, label_path)
}

fn random_probs(rows: usize, models: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * models)
        .flat_map(|_| {
            let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(move |v| v / s).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn prediction_and_label_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probs = ClassPredictions::from_probs(5, 3, 4, random_probs(5, 3, 4, &mut rng)).unwrap();
    let logits = ClassPredictions::from_logits(
        5,
        2,
        3,
        (0..30).map(|_| rng.random_range(-5.0..5.0)).collect(),
    )
    .unwrap();
    let gauss = RegressionPredictions::new(
        4,
        2,
        (0..8)
            .map(|_| Gaussian::new(rng.random_range(-1.0..1.0), rng.random_range(0.1..3.0)).unwrap())
            .collect(),
    )
    .unwrap();
    for (name, preds) in [
        ("probs", EnsemblePredictions::from(probs)),
        ("logits", logits.into()),
        ("gauss", gauss.into()),
    ] {
        let path = dir.path().join(format!("{name}.jsonl"));
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap().1, preds, "{name}");
    }

    let classes = Labels::Classes(vec![0, 3, 1, 2]);
    let targets = Labels::Targets((0..20).map(|_| rng.random::<f64>() * 1e3 - 500.0).collect());
    for (labels, kind) in [(classes, "classification"), (targets, "regression")] {
        let path = dir.path().join("labels.csv");
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path, kind).unwrap(), labels);
    }
}

#[test]
fn report_round_trips_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let preds: EnsemblePredictions = RegressionPredictions::new(
        30,
        3,
        (0..90).map(|_| Gaussian::new(rng.random(), 1.0 + rng.random::<f64>()).unwrap()).collect(),
    )
    .unwrap()
    .into();
    let labels = Labels::Targets((0..30).map(|_| rng.random::<f64>() * 3.0).collect());
    let report = run_ppc(
        &preds,
        &PosteriorWeights::uniform(3).unwrap(),
        &labels,
        &TestStatistic::calibration_error(17).unwrap(),
        UncertaintyMode::ConditionallyIndependent,
        333,
        4,
    )
    .unwrap();
    let file = ReportFile::new(
        report,
        InputDigests {
            predictions: "ab".into(),
            labels: "cd".into(),
        },
    );
    let path = dir.path().join("report.json");
    write_json(&path, &file).unwrap();
    let back: ReportFile = read_json(&path).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.report.p_value.to_bits(), file.report.p_value.to_bits());
    assert_eq!(back.report.sharpness.to_bits(), file.report.sharpness.to_bits());
}

#[test]
fn corrupt_header_is_an_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, labels) = one_hot_pair(dir.path(), &[0, 1]);
    let text = std::fs::read_to_string(&pred).unwrap();
    std::fs::write(&pred, text.replacen("\"models\":2", "\"models\":-2", 1)).unwrap();
    let out = run(&["check", "--predictions", p(&pred), "--labels", p(&labels), "--statistic", "ece"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("'models'") && err.contains(":1:"), "{err}");
}

#[test]
fn malformed_body_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, labels) = one_hot_pair(dir.path(), &[0, 1]);
    let text = std::fs::read_to_string(&pred).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = r#"{"preds":[[1,0]]}"#;
    std::fs::write(&pred, lines.join("\n")).unwrap();
    let out = run(&["check", "--predictions", p(&pred), "--labels", p(&labels), "--statistic", "ece"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"));

    let (pred, labels) = one_hot_pair(dir.path(), &[0, 1]);
    std::fs::write(&labels, "label\n0\nx\n").unwrap();
    let out = run(&["check", "--predictions", p(&pred), "--labels", p(&labels), "--statistic", "ece"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pair.csv:3:"));
}

#[test]
fn statistic_of_wrong_kind_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, labels) = one_hot_pair(dir.path(), &[0, 1]);
    let out = run(&["check", "--predictions", p(&pred), "--labels", p(&labels), "--statistic", "picp"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn impossible_labels_fail_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, labels) = one_hot_pair(dir.path(), &[0, 1]);
    let report = dir.path().join("r.json");
    let out = run(&[
        "check", "--predictions", p(&pred), "--labels", p(&labels), "--statistic", "ece",
        "--mode", "bayesian", "--out", p(&report),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let json: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["p_value"], 0.0);
    assert_eq!(json["passed"], false);

    // Accuracy cannot see the impossibility: the integrated argmax is class 0
    // on both rows, so observed accuracy 0.5 sits between replicates 0 and 1.
    let out = run(&[
        "check", "--predictions", p(&pred), "--labels", p(&labels), "--statistic", "accuracy",
    ]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn self_generated_single_model_fixture_passes() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, c) = (300, 3);
    let probs = random_probs(n, 1, c, &mut rng);
    let preds = ClassPredictions::from_probs(n, 1, c, probs.clone()).unwrap();
    let pred = dir.path().join("m1.jsonl");
    write_predictions(&pred, &preds.into()).unwrap();
    let labels = dir.path().join("m1.csv");
    let mut passed = 0;
    for seed in 0..100u64 {
        let mut label_rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let ys: Vec<usize> = probs
            .chunks(c)
            .map(|row| {
                let u: f64 = label_rng.random();
                let mut acc = 0.0;
                row.iter().position(|q| {
                    acc += q;
                    u < acc
                })
                .unwrap_or(c - 1)
            })
            .collect();
        write_labels(&labels, &Labels::Classes(ys)).unwrap();
        let seed = seed.to_string();
        let out = run(&[
            "check", "--predictions", p(&pred), "--labels", p(&labels), "--statistic", "ece",
            "--seed", &seed,
        ]);
        match out.status.code() {
            Some(0) => passed += 1,
            Some(2) => {}
            other => panic!("unexpected exit {other:?}: {}", String::from_utf8_lossy(&out.stderr)),
        }
    }
    assert!(passed >= 99, "{passed}/100");
}

#[test]
fn point_mode_equals_bayesian_for_one_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let preds = RegressionPredictions::new(
        50,
        1,
        (0..50).map(|_| Gaussian::new(rng.random(), 1.0).unwrap()).collect(),
    )
    .unwrap();
    let pred = dir.path().join("m1.jsonl");
    let labels = dir.path().join("m1.csv");
    write_predictions(&pred, &preds.into()).unwrap();
    write_labels(&labels, &Labels::Targets((0..50).map(|_| rng.random::<f64>() * 2.0).collect()))
        .unwrap();
    let report = |mode: &str| {
        let out_path = dir.path().join(format!("{}.json", mode.replace(':', "_")));
        let out = run(&[
            "check", "--predictions", p(&pred), "--labels", p(&labels), "--statistic", "calibration",
            "--mode", mode, "--seed", "8", "--out", p(&out_path),
        ]);
        assert!(matches!(out.status.code(), Some(0) | Some(2)));
        let mut json: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
        json.as_object_mut().unwrap().remove("mode");
        serde_json::to_string(&json).unwrap()
    };
    assert_eq!(report("point:0"), report("bayesian"));
}

/// Logits `ln k_c` with rows repeated so label frequencies equal `softmax(z)`.
fn stationary_logits() -> (ClassPredictions, Vec<usize>) {
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for counts in [[2u32, 3, 5], [4, 4, 2], [7, 2, 1]] {
        let z: Vec<f64> = counts.iter().map(|&k| (k as f64).ln()).collect();
        for (class, &k) in counts.iter().enumerate() {
            for _ in 0..k * 5 {
                logits.extend_from_slice(&z);
                labels.push(class);
            }
        }
    }
    // Recalibration rows come first: make them a faithful copy of the law.
    let rows = labels.len();
    let mut all_logits = logits.clone();
    all_logits.extend(logits.iter().cycle().take(logits.len() * 4));
    let mut all_labels = labels.clone();
    all_labels.extend(labels.iter().cycle().take(rows * 4));
    (ClassPredictions::from_logits(rows * 5, 1, 3, all_logits).unwrap(), all_labels)
}

#[test]
fn recalibrate_keeps_calibrated_temperatures() {
    let dir = tempfile::tempdir().unwrap();
    let (preds, labels) = stationary_logits();
    let n = preds.rows();
    let pred = dir.path().join("z.jsonl");
    let lab = dir.path().join("y.csv");
    write_predictions(&pred, &preds.into()).unwrap();
    write_labels(&lab, &Labels::Classes(labels)).unwrap();
    let temps = dir.path().join("t.json");
    let out_pred = dir.path().join("eval.jsonl");
    let out_lab = dir.path().join("eval.csv");
    let out = run(&[
        "recalibrate", "--predictions", p(&pred), "--labels", p(&lab), "--out-temps", p(&temps),
        "--out-predictions", p(&out_pred), "--out-labels", p(&out_lab),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: Value = serde_json::from_str(&std::fs::read_to_string(&temps).unwrap()).unwrap();
    let t = json["temperatures"].as_array().unwrap();
    assert_eq!(t.len(), 1);
    assert!((t[0].as_f64().unwrap() - 1.0).abs() < 1e-3, "{t:?}");
    let (header, _) = read_predictions(&out_pred).unwrap();
    assert_eq!(header.rows, n - n / 5);
    assert_eq!(read_labels(&out_lab, "classification").unwrap().len(), n - n / 5);
}

#[test]
fn recalibrate_improves_overconfident_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, m, c) = (2_503, 2, 4);
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let mut avg = vec![0.0; c];
        for _ in 0..m {
            let z: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
            let e: Vec<f64> = z.iter().map(|v| (v / 2.0).exp()).collect();
            let s: f64 = e.iter().sum();
            for (a, v) in avg.iter_mut().zip(&e) {
                *a += v / s / m as f64;
            }
            logits.extend(z);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        labels.push(avg.iter().position(|q| {
            acc += q;
            u < acc
        })
        .unwrap_or(c - 1));
    }
    let preds = ClassPredictions::from_logits(n, m, c, logits).unwrap();
    let pred = dir.path().join("z.jsonl");
    let lab = dir.path().join("y.csv");
    write_predictions(&pred, &preds.clone().into()).unwrap();
    write_labels(&lab, &Labels::Classes(labels.clone())).unwrap();
    let out_pred = dir.path().join("eval.jsonl");
    let out = run(&[
        "recalibrate", "--predictions", p(&pred), "--labels", p(&lab), "--out-temps",
        p(&dir.path().join("t.json")), "--out-predictions", p(&out_pred),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let cut = n / 5;
    let (_, scaled) = read_predictions(&out_pred).unwrap();
    let scaled = scaled.as_classification().unwrap().clone();
    assert_eq!(scaled.rows(), n - cut);
    let raw = preds.select_rows(cut..n);
    let before = ensemble_nll(&raw, &labels[cut..]).unwrap();
    let after = ensemble_nll(&scaled, &labels[cut..]).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn recalibrate_rejects_probabilities_without_flag() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let preds = ClassPredictions::from_probs(20, 1, 3, random_probs(20, 1, 3, &mut rng)).unwrap();
    let pred = dir.path().join("p.jsonl");
    let lab = dir.path().join("y.csv");
    write_predictions(&pred, &preds.into()).unwrap();
    write_labels(&lab, &Labels::Classes((0..20).map(|i| i % 3).collect())).unwrap();
    let args = |flag: bool| {
        let mut v = vec![
            "recalibrate".to_string(), "--predictions".into(), p(&pred).into(), "--labels".into(),
            p(&lab).into(), "--out-temps".into(), p(&dir.path().join("t.json")).into(),
            "--out-predictions".into(), p(&dir.path().join("o.jsonl")).into(),
        ];
        if flag {
            v.push("--allow-log-probs".into());
        }
        bin().args(v).output().unwrap()
    };
    assert_eq!(args(false).status.code(), Some(1));
    assert_eq!(args(true).status.code(), Some(0));
}

#[test]
fn simulate_location_mixture_is_near_marginal() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--scenario", "location", "--n", "3", "--seed", "2", "--out-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let (_, preds) = read_predictions(&dir.path().join("predictions.jsonl")).unwrap();
    let preds = preds.as_regression().unwrap().clone();
    assert_eq!(preds.models(), 1000);
    let means: Vec<f64> = preds.row(0).iter().map(|g| g.mean).collect();
    let mu = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    let total = var + preds.get(0, 0).variance();
    assert!((total - 2.0).abs() < 0.15, "{total}");
    let (_, marginal) = read_predictions(&dir.path().join("marginal.jsonl")).unwrap();
    let g = marginal.as_regression().unwrap().get(0, 0);
    assert!((g.variance() - 2.0).abs() < 1e-12);
    assert_eq!(read_labels(&dir.path().join("labels.csv"), "regression").unwrap().len(), 3);
}

#[test]
fn simulate_conjugate_single_observation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--scenario", "conjugate", "--data", "0", "--out-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let (_, preds) = read_predictions(&dir.path().join("predictive.jsonl")).unwrap();
    let g = preds.as_regression().unwrap().get(0, 0);
    assert_eq!(g.mean, 0.0);
    assert!((g.variance() - 1.5).abs() < 1e-12);
}

#[test]
fn simulate_quadratic_respects_holdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate", "--scenario", "quadratic", "--n", "400", "--test-size", "50", "--ood-size", "40",
        "--models", "5", "--out-dir", p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(dir.path().join("train.csv")).unwrap();
    let mut count = 0;
    for rec in reader.records() {
        let x: f64 = rec.unwrap()[0].parse().unwrap();
        assert!(!(x > -1.5 && x < 0.0), "{x}");
        count += 1;
    }
    assert_eq!(count, 400);
    let (header, _) = read_predictions(&dir.path().join("ood.jsonl")).unwrap();
    assert_eq!((header.rows, header.models), (40, 5));
    let out = run(&[
        "check", "--predictions", p(&dir.path().join("test.jsonl")), "--labels",
        p(&dir.path().join("test_labels.csv")), "--statistic", "picp", "--replications", "50",
    ]);
    assert!(matches!(out.status.code(), Some(0) | Some(2)));
}

fn oracle_json(args: &[&str]) -> Value {
    let out = run(args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn atoms(json: &Value) -> Vec<(f64, f64)> {
    json["atoms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["value"].as_f64().unwrap(), a["mass"].as_f64().unwrap()))
        .collect()
}

#[test]
fn oracle_examples_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let single = dir.path().join("single.jsonl");
    write_predictions(&single, &ClassPredictions::from_nested(&[vec![vec![0.7, 0.3]]]).unwrap().into())
        .unwrap();
    let json = oracle_json(&["oracle", "--predictions", p(&single), "--statistic", "accuracy"]);
    let a = atoms(&json);
    assert_eq!(a.len(), 2);
    assert_eq!(a[0].0, 0.0);
    assert!((a[0].1 - 0.3).abs() < 1e-15);
    assert_eq!(a[1].0, 1.0);
    assert!((a[1].1 - 0.7).abs() < 1e-15);

    let (pair, labels) = one_hot_pair(dir.path(), &[0, 1]);
    let bayes = oracle_json(&["oracle", "--predictions", p(&pair), "--statistic", "accuracy"]);
    assert_eq!(atoms(&bayes), vec![(0.0, 0.5), (1.0, 0.5)]);
    let indep = oracle_json(&[
        "oracle", "--predictions", p(&pair), "--labels", p(&labels), "--statistic", "accuracy",
        "--mode", "independent",
    ]);
    assert_eq!(atoms(&indep), vec![(0.0, 0.25), (0.5, 0.5), (1.0, 0.25)]);
    assert_eq!(indep["observed"], 0.5);
    assert_eq!(indep["p_value"], 0.25);
}

#[test]
fn oracle_reports_required_budget() {
    let dir = tempfile::tempdir().unwrap();
    let (pair, _) = one_hot_pair(dir.path(), &[0, 0]);
    let out = run(&["oracle", "--predictions", p(&pair), "--statistic", "accuracy", "--budget", "7"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires 8"));
}
