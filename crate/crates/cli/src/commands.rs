use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use advlab_core::attacks::{check_budget, run_attack};
use advlab_core::classifier::{ClassifierConfig, TargetSpec};
use advlab_core::data::{
    load_classifier, load_flow, save_classifier, save_flow, synth_manifold_dataset, two_moons, write_atomic,
    Container, SyntheticManifoldSpec, TensorDataset,
};
use advlab_core::evaluation::{
    default_suite, evaluate_corruptions, evaluate_robustness, track_training_curves, CorruptionKind, CorruptionSpec,
    EvalOptions, EvalReport, EVAL_CHUNK,
};
use advlab_core::flow::{fit_mle, FlowModel};
use advlab_core::rng::rng_for;
use advlab_core::training::{resume_training, TrainState};
use advlab_core::ClassifierModel;
use ndarray::{concatenate, ArrayD, Axis};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SuiteFile, SynthSource};
use crate::Failure;

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Path stored under `key`, required to name an existing file.
fn input<'a>(value: &'a Option<PathBuf>, key: &str) -> std::result::Result<&'a Path, Failure> {
    let p = value
        .as_deref()
        .ok_or_else(|| usage(format!("missing `{key}` (set it in the config or pass --{key} <path>)")))?;
    if !p.is_file() {
        return Err(usage(format!("`{key}` = {} does not exist", p.display())));
    }
    Ok(p)
}

/// Short content hash identifying a checkpoint file.
fn checkpoint_id(path: &Path) -> std::result::Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Runtime(format!("reading {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn eval_data(cfg: &RunConfig) -> std::result::Result<TensorDataset<f64>, Failure> {
    let path = match &cfg.paths.eval_data {
        Some(_) => input(&cfg.paths.eval_data, "paths.eval_data")?,
        None => input(&cfg.paths.train_data, "paths.train_data")?,
    };
    Ok(TensorDataset::load(path)?)
}

fn optional_flow(cfg: &RunConfig, needed: bool) -> std::result::Result<Option<FlowModel<f64>>, Failure> {
    match (&cfg.paths.flow, needed) {
        (None, false) => Ok(None),
        (None, true) => Err(usage("this configuration needs a flow checkpoint: set `paths.flow`")),
        (Some(_), _) => Ok(Some(load_flow(input(&cfg.paths.flow, "paths.flow")?)?)),
    }
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Outcome {
    let s = &cfg.synth;
    let (full, n_train) = match s.source {
        SynthSource::Manifold => {
            let mut spec = s
                .manifold
                .clone()
                .unwrap_or_else(|| SyntheticManifoldSpec::affine([1, 8, 8], 2000, cfg.seed));
            let n_train = spec.n_samples;
            spec.n_samples += s.eval_samples;
            let data = synth_manifold_dataset(&spec)?;
            save_flow(&data.generator, cfg.seed, &out.join("generator.flow"))?;
            (data.dataset, n_train)
        }
        SynthSource::TwoMoons => (two_moons(s.n_samples + s.eval_samples, s.noise, cfg.seed)?, s.n_samples),
    };
    if s.eval_samples == 0 {
        full.save(&out.join("train.data"))?;
    } else {
        let (train, eval) = full.split_at(n_train)?;
        train.save(&out.join("train.data"))?;
        eval.save(&out.join("eval.data"))?;
    }
    println!(
        "wrote {} samples ({} train) of shape {:?}, {} classes, to {}",
        full.len(),
        n_train,
        full.image_shape(),
        full.num_classes(),
        out.display()
    );
    Ok(())
}

pub fn train_flow(cfg: &RunConfig, out: &Path) -> Outcome {
    let data = TensorDataset::<f64>::load(input(&cfg.paths.train_data, "paths.train_data")?)?;
    let flow_cfg = cfg.flow.to_config(data.image_shape());
    let fit = fit_mle(data.images(), flow_cfg, &cfg.flow_training)?;
    save_flow(&fit.model, cfg.seed, &out.join("flow.ckpt"))?;
    let mut trace = String::from("epoch,nll\n");
    let _ = writeln!(trace, "0,{}", fit.initial_nll);
    for (e, v) in fit.nll_trace.iter().enumerate() {
        let _ = writeln!(trace, "{},{v}", e + 1);
    }
    write_atomic(&out.join("nll_trace.csv"), trace.as_bytes())?;
    println!(
        "flow NLL {:.4} -> {:.4} nats per sample",
        fit.initial_nll,
        fit.nll_trace.last().copied().unwrap_or(fit.initial_nll)
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Outcome {
    let tc = &cfg.training;
    tc.validate()?;
    let flow = optional_flow(cfg, tc.needs_flow())?;
    let data = TensorDataset::<f64>::load(input(&cfg.paths.train_data, "paths.train_data")?)?;
    let eval = match &cfg.paths.eval_data {
        Some(_) => Some(TensorDataset::<f64>::load(input(&cfg.paths.eval_data, "paths.eval_data")?)?),
        None => None,
    };
    let mut state = match &cfg.paths.train_state {
        Some(_) => TrainState::load(input(&cfg.paths.train_state, "paths.train_state")?)?.0,
        None => {
            let cc = ClassifierConfig::new(
                cfg.classifier.architecture.clone(),
                data.num_classes(),
                data.image_shape(),
            );
            TrainState::new(
                ClassifierModel::new(cc, &mut rng_for(cfg.seed, "classifier-init", 0))?,
                tc,
            )
        }
    };
    resume_training(&mut state, flow.as_ref(), &data, eval.as_ref(), tc)?;
    save_classifier(&state.model, cfg.seed, &out.join("classifier.ckpt"))?;
    state.save(tc, &out.join("train_state.ckpt"))?;
    track_training_curves(&state, &out.join("curves.csv"))?;
    for m in &state.metrics {
        println!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  std {:.4}  robust {:.4}",
            m.epoch, m.learning_rate, m.train_loss, m.std_acc, m.robust_acc
        );
    }
    Ok(())
}

pub fn attack(cfg: &RunConfig, out: &Path) -> Outcome {
    let a = &cfg.attack;
    a.threat.validate()?;
    let ckpt = input(&cfg.paths.classifier, "paths.classifier")?;
    let model = load_classifier::<f64>(ckpt)?;
    let flow = optional_flow(cfg, a.kind.needs_flow())?;
    let mut data = eval_data(cfg)?;
    if let Some(n) = a.max_samples {
        data = data.take(n)?;
    }
    let mut rng = rng_for(cfg.seed, "attack-command", 0);
    let (mut xs, mut deltas, mut success) = (Vec::new(), Vec::new(), Vec::new());
    for (i, chunk) in data.images().axis_chunks_iter(Axis(0), EVAL_CHUNK).enumerate() {
        let y = &data.labels()[i * EVAL_CHUNK..i * EVAL_CHUNK + chunk.shape()[0]];
        let adv = run_attack(a.kind, &model, flow.as_ref(), &chunk.to_owned(), &TargetSpec::hard(y), &a.threat, &mut rng)?;
        check_budget(&adv, &a.threat).map_err(|e| Failure::Internal(e.to_string()))?;
        success.extend(adv.success.iter().map(|&s| s as u32));
        xs.push(adv.x_adv);
        deltas.push(adv.delta);
    }
    let join = |parts: &[ArrayD<f64>]| {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).expect("chunks share a shape")
    };
    let (x_adv, delta) = (join(&xs), join(&deltas));
    if x_adv.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Failure::Internal("attack output left the pixel range".into()));
    }
    let success_rate = success.iter().sum::<u32>() as f64 / success.len() as f64;
    let meta = serde_json::json!({
        "attack": a.kind,
        "threat": a.threat,
        "seed": cfg.seed,
        "checkpoint": checkpoint_id(ckpt)?,
        "n_samples": data.len(),
        "success_rate": success_rate,
    });
    let mut c = Container::new("adversarial", Some(cfg.seed), meta.clone());
    c.push_real("x_adv", &x_adv);
    c.push_real("delta", &delta);
    c.push_u32("labels", &data.labels().iter().map(|&l| l as u32).collect::<Vec<_>>());
    c.push_u32("success", &success);
    c.save(&out.join("adversarial.data"))?;
    let mut text = serde_json::to_string_pretty(&meta).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    write_atomic(&out.join("attack.json"), text.as_bytes())?;
    println!("{:?}: success rate {:.4} on {} samples", a.kind, success_rate, data.len());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, out: &Path, timestamp: &str) -> Outcome {
    let e = &cfg.evaluation;
    let suite = match &cfg.paths.suite {
        Some(_) => {
            let p = input(&cfg.paths.suite, "paths.suite")?;
            let text = std::fs::read_to_string(p).map_err(|err| Failure::Runtime(err.to_string()))?;
            toml::from_str::<SuiteFile>(&text)
                .map_err(|err| usage(format!("suite file {}: {err}", p.display())))?
                .attack
        }
        None => default_suite(e.eps, e.eta),
    };
    let needs_flow = suite.iter().any(|s| s.attack.needs_flow());
    let ckpt = input(&cfg.paths.classifier, "paths.classifier")?;
    let model = load_classifier::<f64>(ckpt)?;
    let flow = optional_flow(cfg, needs_flow)?;
    let data = eval_data(cfg)?;
    let opts = EvalOptions {
        seed: cfg.seed,
        max_samples: e.max_samples,
        checkpoint: checkpoint_id(ckpt)?,
    };
    let mut report = evaluate_robustness(&model, flow.as_ref(), &data, &suite, &opts)?;
    report.save(&out.join("report.jsonl"))?;
    report.timestamp = Some(timestamp.to_owned());
    print!("{}", report.render_table());
    if e.corruptions {
        let specs: Vec<CorruptionSpec> = CorruptionKind::ALL
            .iter()
            .flat_map(|&k| e.severities.iter().map(move |&s| CorruptionSpec::new(k, s, cfg.seed)))
            .collect();
        let mut sweep: EvalReport = evaluate_corruptions(&model, &data, &specs, &opts)?;
        sweep.save(&out.join("corruptions.jsonl"))?;
        sweep.timestamp = Some(timestamp.to_owned());
        print!("{}", sweep.render_table());
    }
    Ok(())
}

pub fn curves(cfg: &RunConfig, out: &Path) -> Outcome {
    let (state, _) = TrainState::<f64>::load(input(&cfg.paths.train_state, "paths.train_state")?)?;
    let path = out.join("curves.csv");
    track_training_curves(&state, &path)?;
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("{text}");
    Ok(())
}
