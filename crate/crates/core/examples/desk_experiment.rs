//! Paired seeded runs of normal training, AT with JSA and IJSAT on a
//! synthetic exact-manifold dataset, evaluated under PGD-20.
//!
//! Usage: `cargo run --release --example desk_experiment -- [key=value ...]`
//! with keys `n`, `eval`, `epochs`, `eps`, `eta`, `shift`, `margin`,
//! `hidden`, `seed`, `lr`, `tau`, `drop`.

use std::collections::HashMap;
use std::time::Instant;

use advlab_core::attacks::{AttackKind, ThreatModel};
use advlab_core::classifier::{Architecture, ClassifierConfig, ClassifierModel};
use advlab_core::data::{synth_manifold_dataset, ClassShift, SyntheticManifoldSpec};
use advlab_core::evaluation::{accuracy, attacked_accuracy};
use advlab_core::rng::rng_for;
use advlab_core::training::{train_classifier, OptimizerConfig, TrainConfig, TrainMode};

fn main() -> advlab_core::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map(|v| v.parse().expect("number")).unwrap_or(d);
    let n = get("n", 1500.0) as usize;
    let n_eval = get("eval", 500.0) as usize;
    let epochs = get("epochs", 10.0) as usize;
    let eps = get("eps", 0.1);
    let eta = get("eta", 0.3);
    let seed = get("seed", 0.0) as u64;
    let hidden = get("hidden", 64.0) as usize;
    let drop = get("drop", (epochs * 2 / 3) as f64) as usize;

    let mut spec = SyntheticManifoldSpec::affine([1, 8, 8], n + n_eval, seed);
    spec.margin = get("margin", 0.5);
    spec.class_shift = Some(ClassShift {
        magnitude: get("shift", 0.3),
        coordinates: None,
    });
    let synth = synth_manifold_dataset(&spec)?;
    let (train, eval) = synth.dataset.split_at(n)?;
    let flow = synth.generator;

    let base = TrainConfig {
        epochs,
        batch_size: 64,
        optimizer: OptimizerConfig {
            learning_rate: get("lr", 0.05),
            drop_epochs: vec![drop],
            ..OptimizerConfig::default()
        },
        threat: ThreatModel::joint(eps, eps / 4.0, eta, eta / 4.0, 10),
        attack: AttackKind::Jsa,
        mixup_tau: get("tau", 0.1),
        probe_samples: n_eval,
        seed,
        ..TrainConfig::default()
    };
    let cc = ClassifierConfig::new(Architecture::Mlp { hidden: vec![hidden] }, 2, [1, 8, 8]);
    let probe = ThreatModel::pgd(eps, eps / 4.0, 20);
    for mode in [TrainMode::Normal, TrainMode::At, TrainMode::Ijsat] {
        let t = Instant::now();
        let model = ClassifierModel::new(cc.clone(), &mut rng_for(seed, "classifier-init", 0))?;
        let cfg = TrainConfig { mode, ..base.clone() };
        let state = train_classifier(model, Some(&flow), &train, Some(&eval), &cfg)?;
        let std = accuracy(&state.model, eval.images(), eval.labels())?;
        let rob = attacked_accuracy(
            AttackKind::Pgd,
            &state.model,
            None,
            eval.images(),
            eval.labels(),
            &probe,
            &mut rng_for(seed, "final-probe", 0),
        )?;
        let curve: Vec<String> = state.metrics.iter().map(|m| format!("{:.3}", m.robust_acc)).collect();
        println!(
            "{mode:?}: std {std:.4} pgd20 {rob:.4} ({:.1}s) curve [{}]",
            t.elapsed().as_secs_f64(),
            curve.join(" ")
        );
    }
    Ok(())
}
