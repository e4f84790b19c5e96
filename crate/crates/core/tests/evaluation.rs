mod common;

use advlab_core::attacks::{AttackKind, ThreatModel};
use advlab_core::classifier::{Architecture, ClassifierConfig};
use advlab_core::data::{synth_manifold_dataset, LabelRule, SyntheticManifoldSpec};
use advlab_core::evaluation::{
    accuracy, default_suite, evaluate_corruptions, evaluate_robustness, read_curves, track_training_curves,
    CorruptionKind, CorruptionSpec, EvalOptions, EvalReport, RowKind, SuiteEntry, CURVE_HEADER,
};
use advlab_core::training::{train_classifier, OptimizerConfig, TrainConfig};
use advlab_core::ClassifierModel;
use common::*;
use ndarray::arr1;

fn opts(seed: u64) -> EvalOptions {
    EvalOptions {
        seed,
        max_samples: None,
        checkpoint: "test".into(),
    }
}

/// Pooled averages recomputed from the individual rows.
fn check_averages(report: &EvalReport, kind: RowKind) {
    let pool = |rows: Vec<_>| {
        let (c, n) = rows
            .iter()
            .fold((0usize, 0usize), |(c, n), r: &&advlab_core::evaluation::ReportRow| (c + r.correct, n + r.n_samples));
        c as f64 / n as f64
    };
    let picked: Vec<_> = report.rows.iter().filter(|r| r.row == kind).collect();
    let with_std: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.row == kind || r.row == RowKind::Standard)
        .collect();
    assert_eq!(report.row("average_excluding_standard").unwrap().accuracy, pool(picked));
    assert_eq!(report.row("average_including_standard").unwrap().accuracy, pool(with_std));
}

#[test]
fn input_blind_ten_class_model_scores_chance_on_every_row() {
    // ten-way arg-max rule: labels are uniform over classes
    let mut spec = SyntheticManifoldSpec::affine([1, 4, 4], 2000, 0);
    spec.label_rule = LabelRule::Argmax {
        coordinates: (0..10).collect(),
    };
    let s = synth_manifold_dataset(&spec).unwrap();
    let mut m = ClassifierModel::<f64>::zeros(ClassifierConfig::new(Architecture::Linear, 10, [1, 4, 4])).unwrap();
    let mut bias = arr1(&[0.0; 10]);
    bias[3] = 1.0;
    m.params_mut().insert("head.b", bias.into_dyn());
    let report = evaluate_robustness(&m, Some(&s.generator), &s.dataset, &default_suite(0.03, 0.02), &opts(0)).unwrap();
    assert_eq!(report.rows.len(), 7);
    for row in &report.rows {
        assert!((row.accuracy - 0.1).abs() <= 0.03, "{} = {}", row.name, row.accuracy);
    }
    for row in &report.rows[..5] {
        assert_eq!(row.n_samples, 2000);
    }
    check_averages(&report, RowKind::Attack);
}

fn trained_toy() -> (ClassifierModel<f64>, advlab_core::data::TensorDataset<f64>, advlab_core::flow::FlowModel<f64>) {
    let (data, flow) = small_manifold(1200, 30);
    let (train, eval) = data.split_at(800).unwrap();
    (normal_train(mlp([1, 4, 4], &[32], 2, 31), &train, 10, 0), eval, flow)
}

#[test]
fn gaussian_noise_accuracy_falls_with_severity() {
    let (m, eval, _) = trained_toy();
    let specs: Vec<_> = (0..=5).map(|s| CorruptionSpec::new(CorruptionKind::GaussianNoise, s, 7)).collect();
    let report = evaluate_corruptions(&m, &eval, &specs, &opts(0)).unwrap();
    let accs: Vec<f64> = specs.iter().map(|s| report.row(&s.name()).unwrap().accuracy).collect();
    let violations = accs.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations <= 1, "{accs:?}");
    assert!(accs[5] < accs[0]);
    assert_eq!(accs[0], report.standard_accuracy);
    check_averages(&report, RowKind::Corruption);
}

#[test]
fn every_corruption_stays_in_the_unit_box() {
    let x = images(20, [3, 8, 8], 0.0, 1.0, 32);
    for kind in CorruptionKind::ALL {
        for severity in 0..=5 {
            let spec = CorruptionSpec::new(kind, severity, 1);
            let y = spec.apply(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.iter().all(|v| (0.0..=1.0).contains(v)), "{}", spec.name());
            if severity == 0 {
                assert_eq!(y, x);
            }
        }
    }
    assert!(CorruptionSpec::new(CorruptionKind::SaltPepper, 6, 1).apply(&x).is_err());
}

#[test]
fn zero_budget_suite_rows_equal_standard_accuracy() {
    let (m, eval, flow) = trained_toy();
    let none = ThreatModel::none();
    let suite = [AttackKind::Pgd, AttackKind::L2Pgd, AttackKind::OmPgd, AttackKind::Jsa]
        .iter()
        .map(|&k| SuiteEntry::new(format!("{k:?}"), k, none.clone()))
        .collect::<Vec<_>>();
    let report = evaluate_robustness(&m, Some(&flow), &eval, &suite, &opts(3)).unwrap();
    let standard = accuracy(&m, eval.images(), eval.labels()).unwrap();
    assert_eq!(report.standard_accuracy, standard);
    for row in &report.rows {
        assert_eq!(row.accuracy, standard, "{}", row.name);
    }
}

#[test]
fn reports_are_deterministic_and_round_trip() {
    let (m, eval, flow) = trained_toy();
    let run = || {
        evaluate_robustness(
            &m,
            Some(&flow),
            &eval,
            &default_suite(0.05, 0.02),
            &EvalOptions {
                max_samples: Some(100),
                ..opts(9)
            },
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    let text = a.to_jsonl().unwrap();
    assert_eq!(text, b.to_jsonl().unwrap());
    assert_eq!(EvalReport::from_jsonl(&text).unwrap(), a);
    assert_eq!(a.rows[0].n_samples, 100);
    let names: Vec<&str> = a.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "standard",
            "pgd20",
            "l2_pgd20",
            "om_pgd50",
            "jsa50",
            "average_excluding_standard",
            "average_including_standard"
        ]
    );
    for r in &a.rows[1..5] {
        assert!(r.accuracy <= a.standard_accuracy);
    }
}

#[test]
fn latent_suite_without_flow_is_rejected() {
    let (m, eval, _) = trained_toy();
    assert!(evaluate_robustness(&m, None, &eval, &default_suite(0.05, 0.02), &opts(0)).is_err());
}

#[test]
fn one_epoch_curve_has_header_and_one_row() {
    let (data, _) = small_manifold(64, 33);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 32,
        probe_samples: 16,
        optimizer: OptimizerConfig {
            drop_epochs: vec![],
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let state = train_classifier(mlp([1, 4, 4], &[8], 2, 0), None, &data, None, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curves.csv");
    track_training_curves(&state, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], CURVE_HEADER.join(","));
    let points = read_curves(&path).unwrap();
    assert_eq!(points.len(), 1);
    let m = &state.metrics[0];
    assert_eq!(
        (points[0].epoch, points[0].train_loss, points[0].std_acc, points[0].robust_acc),
        (m.epoch, m.train_loss, m.std_acc, m.robust_acc)
    );
}
