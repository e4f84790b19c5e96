mod common;

use advlab_core::attacks::{AttackKind, ThreatModel};
use advlab_core::classifier::{Architecture, ClassifierConfig, TargetSpec};
use advlab_core::data::TensorDataset;
use advlab_core::evaluation::attacked_accuracy;
use advlab_core::mixup::{robust_mixup_attack, MixupBatch};
use advlab_core::rng::{rng_for, seeded};
use advlab_core::training::{
    adversarial_train, ijsat_step, ijsat_train, train_classifier, KindAttack, Mixing, OptimizerConfig, TrainConfig,
    TrainMode, TrainState,
};
use advlab_core::ClassifierModel;
use common::*;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

fn quick(epochs: usize, batch_size: usize, probe_samples: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        probe_samples,
        optimizer: OptimizerConfig {
            drop_epochs: vec![],
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Two clusters separated along the first coordinate with a gap of 0.3.
fn separable_toy(n: usize, seed: u64) -> TensorDataset<f64> {
    let mut rng = seeded(seed);
    let mut x = ArrayD::zeros(IxDyn(&[n, 2, 1, 1]));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let a = if label == 0 {
            rng.random_range(0.05..0.35)
        } else {
            rng.random_range(0.65..0.95)
        };
        x[[i, 0, 0, 0]] = a;
        x[[i, 1, 0, 0]] = rng.random_range(0.0..1.0);
        y.push(label);
    }
    TensorDataset::new(x, y, 2, None).unwrap()
}

#[test]
fn pgd_training_on_separable_toy_is_fully_robust() {
    let data = separable_toy(200, 0);
    let eps = 0.1;
    let threat = ThreatModel::pgd(eps, eps / 4.0, 10);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 20,
        mode: TrainMode::At,
        attack: AttackKind::Pgd,
        threat: threat.clone(),
        optimizer: OptimizerConfig {
            learning_rate: 0.5,
            drop_epochs: vec![20],
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        },
        probe_samples: 50,
        ..TrainConfig::default()
    };
    let model = ClassifierModel::zeros(ClassifierConfig::new(Architecture::Linear, 2, [2, 1, 1])).unwrap();
    let state = train_classifier(model, None, &data, None, &cfg).unwrap();
    let robust = attacked_accuracy(
        AttackKind::Pgd,
        &state.model,
        None,
        data.images(),
        data.labels(),
        &ThreatModel::pgd(eps, eps / 4.0, 20),
        &mut seeded(1),
    )
    .unwrap();
    assert_eq!(robust, 1.0);
    assert_eq!(state.metrics.len(), 30);
}

#[test]
fn zero_budget_adversarial_training_is_normal_training() {
    let (data, flow) = small_manifold(96, 2);
    let base = TrainConfig {
        seed: 5,
        ..quick(2, 32, 32)
    };
    let normal = train_classifier(mlp([1, 4, 4], &[8], 2, 3), None, &data, None, &base).unwrap();
    for (mode, attack) in [(TrainMode::At, AttackKind::Pgd), (TrainMode::At, AttackKind::Jsa), (TrainMode::OmAt, AttackKind::Pgd)] {
        let cfg = TrainConfig {
            mode,
            attack,
            threat: ThreatModel::none(),
            ..base.clone()
        };
        let other = train_classifier(mlp([1, 4, 4], &[8], 2, 3), Some(&flow), &data, None, &cfg).unwrap();
        assert_eq!(other.model.params(), normal.model.params(), "{mode:?}/{attack:?}");
    }
}

#[test]
fn plugged_generator_drives_the_inner_step() {
    let (data, flow) = small_manifold(64, 4);
    let cfg = TrainConfig {
        ..quick(1, 32, 16)
    };
    let generator = KindAttack {
        kind: AttackKind::Jsa,
        threat: ThreatModel::joint(0.05, 0.02, 0.02, 0.005, 3),
        flow: Some(&flow),
    };
    let a = adversarial_train(mlp([1, 4, 4], &[8], 2, 0), &data, None, &generator, &cfg).unwrap();
    let b = adversarial_train(mlp([1, 4, 4], &[8], 2, 0), &data, None, &generator, &cfg).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    let plain = train_classifier(mlp([1, 4, 4], &[8], 2, 0), None, &data, None, &cfg).unwrap();
    assert_ne!(a.model.params(), plain.model.params());
}

struct StepFixture {
    model: ClassifierModel<f64>,
    flow: advlab_core::flow::FlowModel<f64>,
    x_i: ArrayD<f64>,
    x_j: ArrayD<f64>,
    y_i: Vec<usize>,
    y_j: Vec<usize>,
}

fn step_fixture(seed: u64) -> StepFixture {
    let (data, flow) = small_manifold(16, seed);
    let (a, b) = data.split_at(8).unwrap();
    StepFixture {
        model: mlp([1, 4, 4], &[6], 2, seed),
        flow,
        x_i: a.images().clone(),
        x_j: b.images().clone(),
        y_i: a.labels().to_vec(),
        y_j: b.labels().to_vec(),
    }
}

#[test]
fn degenerate_step_is_a_plain_cross_entropy_step() {
    let f = step_fixture(6);
    let step = ijsat_step(
        &f.model,
        &f.flow,
        &f.x_i,
        &f.y_i,
        &f.x_j,
        &f.y_j,
        Mixing::Fixed(1.0),
        &ThreatModel::none(),
        &mut seeded(0),
        &mut seeded(1),
    )
    .unwrap();
    let (loss, grads) = f.model.loss_and_gradients(&f.x_i, &TargetSpec::hard(&f.y_i)).unwrap();
    assert!((step.loss - loss).abs() < 1e-9);
    for (name, g) in grads.iter() {
        assert!(max_abs_diff(g, step.gradient.tensor(name)) < 1e-9, "{name}");
    }
}

#[test]
fn step_gradient_matches_finite_differences_at_the_attacked_point() {
    let f = step_fixture(7);
    assert!(f.model.num_parameters() <= 10_000);
    let threat = ThreatModel::joint(0.05, 0.02, 0.03, 0.01, 5);
    let step = ijsat_step(
        &f.model,
        &f.flow,
        &f.x_i,
        &f.y_i,
        &f.x_j,
        &f.y_j,
        Mixing::Beta { tau: 0.1 },
        &threat,
        &mut seeded(2),
        &mut seeded(3),
    )
    .unwrap();
    for (name, tensor) in f.model.params().iter() {
        let shape = tensor.raw_dim();
        let objective = |v: &[f64]| {
            let mut probe = f.model.clone();
            *probe.params_mut().get_mut(name).unwrap() = ArrayD::from_shape_vec(shape.clone(), v.to_vec()).unwrap();
            probe.ce_loss(&step.x_adv, &step.targets).unwrap().mean().unwrap()
        };
        let numeric = numeric_gradient(objective, tensor.as_slice().unwrap(), 1e-5);
        let analytic = step.gradient.tensor(name);
        assert!(rel_err(analytic.as_slice().unwrap(), &numeric) < 1e-3, "{name}");
    }
}

#[test]
fn step_loss_is_the_mixed_loss_at_the_attack_output() {
    let f = step_fixture(8);
    let threat = ThreatModel::joint(0.05, 0.02, 0.03, 0.01, 5);
    let step = ijsat_step(
        &f.model,
        &f.flow,
        &f.x_i,
        &f.y_i,
        &f.x_j,
        &f.y_j,
        Mixing::Fixed(0.3),
        &threat,
        &mut seeded(0),
        &mut seeded(4),
    )
    .unwrap();
    let batch = MixupBatch::new(f.x_i.clone(), f.x_j.clone(), f.y_i.clone(), f.y_j.clone(), 0.3).unwrap();
    let adv = robust_mixup_attack(&f.model, Some(&f.flow), &batch, &threat, &mut seeded(4)).unwrap();
    assert_eq!(step.x_adv, adv.x_adv);
    let at_output = f.model.ce_loss(&adv.x_adv, &batch.targets()).unwrap().mean().unwrap();
    assert!((step.loss - at_output).abs() < 1e-12);
    assert_eq!(step.alpha, 0.3);
}

#[test]
fn step_is_deterministic() {
    let f = step_fixture(9);
    let threat = ThreatModel::joint(0.05, 0.02, 0.03, 0.01, 5).with_random_start(true);
    let run = || {
        ijsat_step(
            &f.model,
            &f.flow,
            &f.x_i,
            &f.y_i,
            &f.x_j,
            &f.y_j,
            Mixing::Beta { tau: 0.1 },
            &threat,
            &mut rng_for(1, "alpha", 0),
            &mut rng_for(1, "attack", 0),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.gradient, b.gradient);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
}

#[test]
fn one_epoch_of_two_batches_records_one_metric_and_checkpoints() {
    let (data, flow) = small_manifold(64, 10);
    let cfg = TrainConfig {
        mode: TrainMode::Ijsat,
        threat: ThreatModel::joint(0.05, 0.02, 0.02, 0.005, 3),
        ..quick(1, 32, 16)
    };
    let state = ijsat_train(mlp([1, 4, 4], &[8], 2, 1), &flow, &data, None, &cfg).unwrap();
    assert_eq!(state.metrics.len(), 1);
    assert_eq!(state.epoch, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    state.save(&cfg, &path).unwrap();
    let (back, back_cfg) = TrainState::<f64>::load(&path).unwrap();
    assert_eq!(back.model.params(), state.model.params());
    assert_eq!(back.metrics, state.metrics);
    assert_eq!(back_cfg, cfg);
}

#[test]
fn per_example_weights_and_clean_fraction_train() {
    let (data, flow) = small_manifold(64, 11);
    let cfg = TrainConfig {
        mode: TrainMode::Ijsat,
        per_example_alpha: true,
        clean_fraction: 0.5,
        threat: ThreatModel::joint(0.05, 0.02, 0.02, 0.005, 3),
        ..quick(1, 32, 16)
    };
    let state = train_classifier(mlp([1, 4, 4], &[8], 2, 1), Some(&flow), &data, None, &cfg).unwrap();
    assert!(state.metrics[0].train_loss.is_finite());
}

#[test]
fn learning_rate_follows_the_drop_schedule() {
    let (data, _) = small_manifold(32, 12);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        optimizer: OptimizerConfig {
            learning_rate: 0.1,
            drop_epochs: vec![2, 4],
            drop_factor: 0.1,
            ..OptimizerConfig::default()
        },
        probe_samples: 8,
        ..TrainConfig::default()
    };
    let state = train_classifier(mlp([1, 4, 4], &[4], 2, 0), None, &data, None, &cfg).unwrap();
    let lrs: Vec<f64> = state.metrics.iter().map(|m| m.learning_rate).collect();
    // rate at epoch e is 0.1 * 0.1^(number of drops <= e); epochs are 1-based
    let expected: Vec<f64> = (1..=5)
        .map(|e| 0.1 * 0.1f64.powi([2, 4].iter().filter(|&&d| d <= e).count() as i32))
        .collect();
    for (a, b) in lrs.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15, "{lrs:?} vs {expected:?}");
    }
}
