use advlab_core::attacks::{AttackKind, Norm};
use advlab_core::evaluation::default_suite;
use advlab_core::training::{OptimizerKind, TrainConfig};

#[test]
fn default_threat_budgets() {
    let t = TrainConfig::default().threat;
    assert_eq!(t.norm, Norm::Linf);
    assert!((t.image_eps - 8.0 / 255.0).abs() < 1e-15);
    assert!((t.image_step - 2.0 / 255.0).abs() < 1e-15);
    assert_eq!(t.latent_eta, 0.02);
    assert_eq!(t.latent_step, 0.005);
    assert_eq!(t.iterations, 10);
}

#[test]
fn default_optimizer_and_mixing() {
    let cfg = TrainConfig::default();
    let o = &cfg.optimizer;
    assert_eq!(o.kind, OptimizerKind::Sgd);
    assert_eq!(o.learning_rate, 0.1);
    assert_eq!(o.momentum, 0.9);
    assert_eq!(o.weight_decay, 2e-4);
    assert_eq!(o.drop_factor, 0.1);
    assert_eq!(cfg.mixup_tau, 0.1);
}

#[test]
fn default_suite_covers_the_four_seen_attacks() {
    let eps = 8.0 / 255.0;
    let suite = default_suite(eps, 0.02);
    let summary: Vec<(&str, AttackKind, usize)> = suite
        .iter()
        .map(|e| (e.name.as_str(), e.attack, e.threat.iterations))
        .collect();
    assert_eq!(
        summary,
        [
            ("pgd20", AttackKind::Pgd, 20),
            ("l2_pgd20", AttackKind::L2Pgd, 20),
            ("om_pgd50", AttackKind::OmPgd, 50),
            ("jsa50", AttackKind::Jsa, 50),
        ]
    );
    assert_eq!(suite[1].threat.norm, Norm::L2);
    assert_eq!(suite[3].threat.image_eps, eps);
    assert_eq!(suite[3].threat.latent_eta, 0.02);
}

#[test]
fn average_column_includes_the_standard_accuracy() {
    // rows of a published comparison table: standard then six attack or
    // corruption columns, with the printed average last
    let rows: [([f64; 7], f64); 2] = [
        ([94.69, 0.00, 0.00, 0.00, 29.61, 0.00, 0.00], 17.76),
        ([84.15, 49.85, 44.71, 45.71, 45.16, 26.71, 18.75], 45.01),
    ];
    for (values, printed) in rows {
        let with_std = values.iter().sum::<f64>() / 7.0;
        let without = values[1..].iter().sum::<f64>() / 6.0;
        assert!((with_std - printed).abs() < 0.005, "{with_std}");
        assert!((without - printed).abs() > 0.5);
    }
}
