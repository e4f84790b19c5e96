//! Training loops: plain, adversarial with a pluggable attack generator, and
//! interpolated joint-space adversarial training (IJSAT).
//!
//! Randomness is split per consumer and per epoch (`shuffle`, `pairing`,
//! `alpha`, `attack`, `probe`) from the root seed, so resuming at epoch `e`
//! needs no RNG state beyond the epoch counter.

use std::path::Path;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackKind, ThreatModel};
use crate::autodiff::{Tape, Var};
use crate::classifier::{cross_entropy_on_tape, ClassifierModel, TargetSpec};
use crate::data::{push_store, read_store, Container, TensorDataset};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, attacked_accuracy};
use crate::flow::FlowModel;
use crate::mixup::{random_pairing, robust_mixup_attack, sample_alpha, MixupBatch};
use crate::optim::{Adam, LrSchedule, Sgd};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::rng::{rng_for, Rng as StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Normal,
    /// Adversarial training with `TrainConfig::attack`.
    At,
    /// Adversarial training with latent-space attacks.
    OmAt,
    Ijsat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            drop_epochs: vec![20, 25],
            drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.learning_rate,
            drop_epochs: self.drop_epochs.clone(),
            drop_factor: self.drop_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub mode: TrainMode,
    pub threat: ThreatModel,
    /// Inner attack for `TrainMode::At`.
    pub attack: AttackKind,
    pub mixup_tau: f64,
    /// One mixing weight per sample instead of per batch.
    pub per_example_alpha: bool,
    /// Weight of the clean (or clean interpolated) loss in the objective.
    pub clean_fraction: f64,
    /// Attack used for the per-epoch robust accuracy; PGD-10 at the
    /// training image budget when absent.
    pub probe: Option<ThreatModel>,
    /// Evaluation samples used for the per-epoch metrics.
    pub probe_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            mode: TrainMode::Normal,
            threat: ThreatModel::joint(8.0 / 255.0, 2.0 / 255.0, 0.02, 0.005, 10),
            attack: AttackKind::Pgd,
            mixup_tau: 0.1,
            per_example_alpha: false,
            clean_fraction: 0.0,
            probe: None,
            probe_samples: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.schedule().validate(self.epochs)?;
        self.threat.validate()?;
        self.probe_threat().validate()?;
        if self.mode == TrainMode::Ijsat && !(self.mixup_tau > 0.0) {
            return Err(Error::Config(format!("mixup_tau must be positive, got {}", self.mixup_tau)));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(Error::Config(format!("clean_fraction {} outside [0, 1]", self.clean_fraction)));
        }
        Ok(())
    }

    pub fn probe_threat(&self) -> ThreatModel {
        self.probe.clone().unwrap_or_else(|| {
            let eps = self.threat.image_eps;
            if eps > 0.0 {
                ThreatModel::pgd(eps, eps / 4.0, 10)
            } else {
                ThreatModel::none()
            }
        })
    }

    pub fn needs_flow(&self) -> bool {
        match self.mode {
            TrainMode::Normal => false,
            TrainMode::At => self.attack.needs_flow(),
            TrainMode::OmAt | TrainMode::Ijsat => true,
        }
    }
}

/// Metrics recorded after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub std_acc: f64,
    pub robust_acc: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum OptimizerState<T: Real> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Real> OptimizerState<T> {
    fn new(cfg: &OptimizerConfig, params: &ParamStore<T>) -> Self {
        match cfg.kind {
            OptimizerKind::Sgd => OptimizerState::Sgd(Sgd::new(params, cfg.momentum, cfg.weight_decay)),
            OptimizerKind::Adam => OptimizerState::Adam(Adam::new(params)),
        }
    }

    fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        match self {
            OptimizerState::Sgd(o) => o.step(params, grads, lr),
            OptimizerState::Adam(o) => o.step(params, grads, lr),
        }
    }
}

impl<T: Real> PartialEq for Adam<T> {
    fn eq(&self, other: &Self) -> bool {
        self.state() == other.state()
    }
}

/// Model, optimizer state and metrics of a (possibly partial) run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Real> {
    pub model: ClassifierModel<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    optimizer: OptimizerState<T>,
}

const STATE_KIND: &str = "train_state";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    classifier: crate::classifier::ClassifierConfig,
    train: TrainConfig,
    epoch: usize,
    metrics: Vec<EpochMetrics>,
    adam_steps: Option<i32>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: ClassifierModel<T>, config: &TrainConfig) -> Self {
        let optimizer = OptimizerState::new(&config.optimizer, model.params());
        Self {
            model,
            epoch: 0,
            metrics: Vec::new(),
            optimizer,
        }
    }

    /// Writes model, optimizer state, metrics and `config` to one file.
    pub fn save(&self, config: &TrainConfig, path: &Path) -> Result<()> {
        let adam_steps = match &self.optimizer {
            OptimizerState::Adam(a) => Some(a.state().0),
            OptimizerState::Sgd(_) => None,
        };
        let meta = serde_json::to_value(StateMeta {
            classifier: self.model.config().clone(),
            train: config.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            adam_steps,
        })?;
        let mut c = Container::new(STATE_KIND, Some(config.seed), meta);
        push_store(&mut c, "param", self.model.params());
        match &self.optimizer {
            OptimizerState::Sgd(s) => push_store(&mut c, "velocity", s.velocity()),
            OptimizerState::Adam(a) => {
                let (_, m, v) = a.state();
                push_store(&mut c, "adam_m", m);
                push_store(&mut c, "adam_v", v);
            }
        }
        c.save(path)
    }

    /// Loads a state together with the configuration it was trained with.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let c = Container::load_kind(path, STATE_KIND)?;
        let meta: StateMeta = serde_json::from_value(c.config.clone())?;
        let model = ClassifierModel::from_parts(meta.classifier, read_store(&c, "param")?)?;
        let optimizer = match meta.train.optimizer.kind {
            OptimizerKind::Sgd => OptimizerState::Sgd(
                Sgd::new(model.params(), meta.train.optimizer.momentum, meta.train.optimizer.weight_decay)
                    .with_velocity(read_store(&c, "velocity")?),
            ),
            OptimizerKind::Adam => OptimizerState::Adam(Adam::new(model.params()).with_state(
                meta.adam_steps.unwrap_or(0),
                read_store(&c, "adam_m")?,
                read_store(&c, "adam_v")?,
            )),
        };
        Ok((
            Self {
                model,
                epoch: meta.epoch,
                metrics: meta.metrics,
                optimizer,
            },
            meta.train,
        ))
    }
}

/// Produces the adversarial counterpart of a batch; the inner maximization
/// of adversarial training.
pub trait AttackGenerator<T: Real> {
    fn generate(
        &self,
        model: &ClassifierModel<T>,
        x: &ArrayD<T>,
        targets: &[TargetSpec],
        rng: &mut StreamRng,
    ) -> Result<ArrayD<T>>;
}

impl<T: Real, F> AttackGenerator<T> for F
where
    F: Fn(&ClassifierModel<T>, &ArrayD<T>, &[TargetSpec], &mut StreamRng) -> Result<ArrayD<T>>,
{
    fn generate(
        &self,
        model: &ClassifierModel<T>,
        x: &ArrayD<T>,
        targets: &[TargetSpec],
        rng: &mut StreamRng,
    ) -> Result<ArrayD<T>> {
        self(model, x, targets, rng)
    }
}

/// Returns the batch unchanged.
pub struct NoAttack;

impl<T: Real> AttackGenerator<T> for NoAttack {
    fn generate(&self, _: &ClassifierModel<T>, x: &ArrayD<T>, _: &[TargetSpec], _: &mut StreamRng) -> Result<ArrayD<T>> {
        Ok(x.clone())
    }
}

/// One of the library attacks with a fixed threat model.
pub struct KindAttack<'a, T: Real> {
    pub kind: AttackKind,
    pub threat: ThreatModel,
    pub flow: Option<&'a FlowModel<T>>,
}

impl<T: Real> AttackGenerator<T> for KindAttack<'_, T> {
    fn generate(
        &self,
        model: &ClassifierModel<T>,
        x: &ArrayD<T>,
        targets: &[TargetSpec],
        rng: &mut StreamRng,
    ) -> Result<ArrayD<T>> {
        Ok(run_attack(self.kind, model, self.flow, x, targets, &self.threat, rng)?.x_adv)
    }
}

/// Objective minimized in the outer step; returns a scalar on the tape.
pub trait TrainingLoss<T: Real> {
    fn loss<'t>(
        &self,
        model: &ClassifierModel<T>,
        bound: &Bound<'t, T>,
        clean: Var<'t, T>,
        adversarial: Var<'t, T>,
        targets: &[TargetSpec],
    ) -> Var<'t, T>;
}

/// Mean cross-entropy on the adversarial batch, optionally blended with
/// the clean batch: `(1 - c) * CE(adv) + c * CE(clean)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy {
    pub clean_fraction: f64,
}

impl<T: Real> TrainingLoss<T> for CrossEntropy {
    fn loss<'t>(
        &self,
        model: &ClassifierModel<T>,
        bound: &Bound<'t, T>,
        clean: Var<'t, T>,
        adversarial: Var<'t, T>,
        targets: &[TargetSpec],
    ) -> Var<'t, T> {
        let adv = cross_entropy_on_tape(model.logits_on_tape(bound, adversarial), targets).mean();
        if self.clean_fraction == 0.0 {
            return adv;
        }
        let nat = cross_entropy_on_tape(model.logits_on_tape(bound, clean), targets).mean();
        adv.scale(T::of(1.0 - self.clean_fraction)).add(nat.scale(T::of(self.clean_fraction)))
    }
}

/// Mean loss and parameter gradient of `loss` at a prepared batch.
pub fn loss_and_gradient<T: Real>(
    model: &ClassifierModel<T>,
    loss: &dyn TrainingLoss<T>,
    clean: &ArrayD<T>,
    adversarial: &ArrayD<T>,
    targets: &[TargetSpec],
) -> Result<(T, ParamStore<T>)> {
    model.check_input(adversarial)?;
    model.validate_targets(targets, adversarial.shape()[0])?;
    let tape = Tape::new();
    let bound = model.params().bind(&tape, true);
    let value = loss.loss(
        model,
        &bound,
        tape.constant(clean.clone()),
        tape.constant(adversarial.clone()),
        targets,
    );
    let v = value.item();
    let mut grads = tape.backward(value);
    Ok((v, bound.gradients(&mut grads)))
}

struct Prepared<T: Real> {
    clean: ArrayD<T>,
    adversarial: ArrayD<T>,
    targets: Vec<TargetSpec>,
}

struct EpochRngs {
    pairing: StreamRng,
    alpha: StreamRng,
    attack: StreamRng,
}

fn check_data<T: Real>(model: &ClassifierModel<T>, data: &TensorDataset<T>) -> Result<()> {
    let [c, h, w] = data.image_shape();
    let [mc, mh, mw] = model.config().input_shape;
    if [c, h, w] != [mc, mh, mw] {
        return Err(Error::shape([mc, mh, mw], [c, h, w]));
    }
    if data.num_classes() > model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model only {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

fn train_loop<T: Real>(
    state: &mut TrainState<T>,
    train: &TensorDataset<T>,
    eval: Option<&TensorDataset<T>>,
    config: &TrainConfig,
    loss: &dyn TrainingLoss<T>,
    prepare: &mut dyn FnMut(&ClassifierModel<T>, ArrayD<T>, Vec<usize>, &mut EpochRngs) -> Result<Prepared<T>>,
) -> Result<()> {
    config.validate()?;
    check_data(&state.model, train)?;
    if let Some(e) = eval {
        check_data(&state.model, e)?;
    }
    let schedule = config.optimizer.schedule();
    let probe = config.probe_threat();
    let eval_set = match eval {
        Some(e) => e.take(config.probe_samples.max(1))?,
        None => train.take(config.probe_samples.max(1))?,
    };
    let n = train.len();
    for epoch in state.epoch + 1..=config.epochs {
        let lr = schedule.rate(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(config.seed, "shuffle", epoch as u64));
        let mut rngs = EpochRngs {
            pairing: rng_for(config.seed, "pairing", epoch as u64),
            alpha: rng_for(config.seed, "alpha", epoch as u64),
            attack: rng_for(config.seed, "attack", epoch as u64),
        };
        let mut total = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = train.batch(idx);
            let prepared = prepare(&state.model, x, y, &mut rngs)?;
            let (value, grads) = loss_and_gradient(
                &state.model,
                loss,
                &prepared.clean,
                &prepared.adversarial,
                &prepared.targets,
            )?;
            if !value.is_finite() || !grads.all_finite() {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            state.optimizer.step(state.model.params_mut(), &grads, lr);
            total += value.as_f64() * idx.len() as f64;
        }
        let std_acc = accuracy(&state.model, eval_set.images(), eval_set.labels())?;
        let robust_acc = if probe.is_zero() {
            std_acc
        } else {
            attacked_accuracy(
                AttackKind::Pgd,
                &state.model,
                None,
                eval_set.images(),
                eval_set.labels(),
                &probe,
                &mut rng_for(config.seed, "probe", epoch as u64),
            )?
        };
        state.metrics.push(EpochMetrics {
            epoch,
            train_loss: total / n as f64,
            std_acc,
            robust_acc,
            learning_rate: lr,
        });
        state.epoch = epoch;
    }
    Ok(())
}

/// Adversarial training: each batch is replaced by `generator`'s output and
/// the loss is minimized on it (hard labels).
pub fn adversarial_train<T: Real>(
    model: ClassifierModel<T>,
    train: &TensorDataset<T>,
    eval: Option<&TensorDataset<T>>,
    generator: &dyn AttackGenerator<T>,
    config: &TrainConfig,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new(model, config);
    resume_adversarial_train(&mut state, train, eval, generator, config)?;
    Ok(state)
}

/// Continues `state` up to `config.epochs`.
pub fn resume_adversarial_train<T: Real>(
    state: &mut TrainState<T>,
    train: &TensorDataset<T>,
    eval: Option<&TensorDataset<T>>,
    generator: &dyn AttackGenerator<T>,
    config: &TrainConfig,
) -> Result<()> {
    let loss = CrossEntropy {
        clean_fraction: config.clean_fraction,
    };
    let mut prepare = |model: &ClassifierModel<T>, x: ArrayD<T>, y: Vec<usize>, rngs: &mut EpochRngs| {
        let targets = TargetSpec::hard(&y);
        let adversarial = generator.generate(model, &x, &targets, &mut rngs.attack)?;
        Ok(Prepared {
            clean: x,
            adversarial,
            targets,
        })
    };
    train_loop(state, train, eval, config, &loss, &mut prepare)
}

/// How the mixing weight of a step is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mixing {
    Beta { tau: f64 },
    Fixed(f64),
}

/// Result of one IJSAT step.
#[derive(Debug, Clone)]
pub struct IjsatStep<T: Real> {
    pub loss: T,
    pub gradient: ParamStore<T>,
    pub alpha: f64,
    /// Attacked interpolated batch the loss was evaluated at.
    pub x_adv: ArrayD<T>,
    pub targets: Vec<TargetSpec>,
}

/// One IJSAT step: sample `alpha`, interpolate the pair, encode the mixture,
/// attack it jointly under the mixed loss and return the mixed loss at the
/// attack output with its parameter gradient. The flow is not updated.
#[allow(clippy::too_many_arguments)]
pub fn ijsat_step<T: Real, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    flow: &FlowModel<T>,
    x_i: &ArrayD<T>,
    y_i: &[usize],
    x_j: &ArrayD<T>,
    y_j: &[usize],
    mixing: Mixing,
    threat: &ThreatModel,
    alpha_rng: &mut R1,
    attack_rng: &mut R2,
) -> Result<IjsatStep<T>> {
    let alpha = match mixing {
        Mixing::Beta { tau } => sample_alpha(tau, alpha_rng)?,
        Mixing::Fixed(a) => a,
    };
    let batch = MixupBatch::new(x_i.clone(), x_j.clone(), y_i.to_vec(), y_j.to_vec(), alpha)?;
    let adv = robust_mixup_attack(model, Some(flow), &batch, threat, attack_rng)?;
    let targets = batch.targets();
    let (loss, gradient) = loss_and_gradient(model, &CrossEntropy::default(), &batch.x_mix, &adv.x_adv, &targets)?;
    if !loss.is_finite() || !gradient.all_finite() {
        return Err(Error::NonFinite {
            what: "IJSAT loss or gradient".into(),
            iteration: 0,
        });
    }
    Ok(IjsatStep {
        loss,
        gradient,
        alpha,
        x_adv: adv.x_adv,
        targets,
    })
}

/// IJSAT over `config.epochs` with pairs formed by permuting each batch.
pub fn ijsat_train<T: Real>(
    model: ClassifierModel<T>,
    flow: &FlowModel<T>,
    train: &TensorDataset<T>,
    eval: Option<&TensorDataset<T>>,
    config: &TrainConfig,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new(model, config);
    resume_ijsat_train(&mut state, flow, train, eval, config)?;
    Ok(state)
}

pub fn resume_ijsat_train<T: Real>(
    state: &mut TrainState<T>,
    flow: &FlowModel<T>,
    train: &TensorDataset<T>,
    eval: Option<&TensorDataset<T>>,
    config: &TrainConfig,
) -> Result<()> {
    if flow.config().input_shape != state.model.config().input_shape {
        return Err(Error::shape(state.model.config().input_shape, flow.config().input_shape));
    }
    let loss = CrossEntropy {
        clean_fraction: config.clean_fraction,
    };
    let mut prepare = |model: &ClassifierModel<T>, x: ArrayD<T>, y: Vec<usize>, rngs: &mut EpochRngs| {
        let perm = random_pairing(y.len(), &mut rngs.pairing);
        let batch = if config.per_example_alpha {
            let alphas = (0..y.len())
                .map(|_| sample_alpha(config.mixup_tau, &mut rngs.alpha))
                .collect::<Result<Vec<_>>>()?;
            let x_j = x.select(ndarray::Axis(0), &perm);
            let y_j = perm.iter().map(|&p| y[p]).collect();
            MixupBatch::per_example(x, x_j, y, y_j, alphas)?
        } else {
            let alpha = sample_alpha(config.mixup_tau, &mut rngs.alpha)?;
            MixupBatch::from_permutation(&x, &y, &perm, alpha)?
        };
        let adv = robust_mixup_attack(model, Some(flow), &batch, &config.threat, &mut rngs.attack)?;
        Ok(Prepared {
            targets: batch.targets(),
            clean: batch.x_mix,
            adversarial: adv.x_adv,
        })
    };
    train_loop(state, train, eval, config, &loss, &mut prepare)
}

/// Runs the loop selected by `config.mode`.
pub fn train_classifier<T: Real>(
    model: ClassifierModel<T>,
    flow: Option<&FlowModel<T>>,
    train: &TensorDataset<T>,
    eval: Option<&TensorDataset<T>>,
    config: &TrainConfig,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new(model, config);
    resume_training(&mut state, flow, train, eval, config)?;
    Ok(state)
}

pub fn resume_training<T: Real>(
    state: &mut TrainState<T>,
    flow: Option<&FlowModel<T>>,
    train: &TensorDataset<T>,
    eval: Option<&TensorDataset<T>>,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    if config.needs_flow() && flow.is_none() {
        return Err(Error::Config(format!("training mode {:?} requires a flow model", config.mode)));
    }
    match config.mode {
        TrainMode::Normal => resume_adversarial_train(state, train, eval, &NoAttack, config),
        TrainMode::At => {
            let generator = KindAttack {
                kind: config.attack,
                threat: config.threat.clone(),
                flow,
            };
            resume_adversarial_train(state, train, eval, &generator, config)
        }
        TrainMode::OmAt => {
            let generator = KindAttack {
                kind: AttackKind::OmPgd,
                threat: config.threat.clone(),
                flow,
            };
            resume_adversarial_train(state, train, eval, &generator, config)
        }
        TrainMode::Ijsat => resume_ijsat_train(state, flow.expect("checked above"), train, eval, config),
    }
}
