//! Gradient-based attacks in image space, latent space and both jointly.
//!
//! Every attack here is a special case of one joint iteration: evaluate the
//! loss at `clip(G(z + lambda) + delta)`, take both gradients from that single
//! pass, move each perturbation by a signed (or L2-normalized) step and
//! project it back onto its ball. Image-only attacks skip the generator.

use ndarray::{Array1, Array2, ArrayD, Axis, Zip};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::classifier::{cross_entropy_on_tape, ClassifierModel, TargetSpec};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, LatentCode};
use crate::real::Real;

/// Slack allowed when checking emitted perturbations against their budgets.
pub const BUDGET_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    #[serde(alias = "inf")]
    Linf,
    L2,
}

/// Attack budgets. `image_eps = 0` switches the image perturbation off and
/// `latent_eta = 0` the latent one; the latent perturbation is always
/// bounded in L-infinity, `norm` applies to the image perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThreatModel {
    pub norm: Norm,
    pub image_eps: f64,
    pub image_step: f64,
    pub latent_eta: f64,
    pub latent_step: f64,
    pub iterations: usize,
    pub random_start: bool,
    /// Clip the classifier input to `[0, 1]` inside every iteration.
    pub clip_in_loop: bool,
    /// Clip the returned image to `[0, 1]`.
    pub clip_output: bool,
    /// Return, per sample, the iterate with the largest loss.
    pub best_iterate: bool,
}

impl Default for ThreatModel {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            image_eps: 0.0,
            image_step: 0.0,
            latent_eta: 0.0,
            latent_step: 0.0,
            iterations: 0,
            random_start: false,
            clip_in_loop: true,
            clip_output: true,
            best_iterate: false,
        }
    }
}

impl ThreatModel {
    /// No perturbation at all.
    pub fn none() -> Self {
        Self::default()
    }

    /// L-infinity image-space PGD.
    pub fn pgd(eps: f64, step: f64, iterations: usize) -> Self {
        Self {
            image_eps: eps,
            image_step: step,
            iterations,
            ..Self::default()
        }
    }

    pub fn l2(eps: f64, step: f64, iterations: usize) -> Self {
        Self {
            norm: Norm::L2,
            ..Self::pgd(eps, step, iterations)
        }
    }

    /// Latent-space only.
    pub fn latent(eta: f64, step: f64, iterations: usize) -> Self {
        Self {
            latent_eta: eta,
            latent_step: step,
            iterations,
            ..Self::default()
        }
    }

    pub fn joint(eps: f64, eps_step: f64, eta: f64, eta_step: f64, iterations: usize) -> Self {
        Self {
            latent_eta: eta,
            latent_step: eta_step,
            ..Self::pgd(eps, eps_step, iterations)
        }
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn with_clip(mut self, in_loop: bool, output: bool) -> Self {
        self.clip_in_loop = in_loop;
        self.clip_output = output;
        self
    }

    pub fn with_best_iterate(mut self, on: bool) -> Self {
        self.best_iterate = on;
        self
    }

    pub fn without_image(mut self) -> Self {
        self.image_eps = 0.0;
        self.image_step = 0.0;
        self
    }

    pub fn without_latent(mut self) -> Self {
        self.latent_eta = 0.0;
        self.latent_step = 0.0;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.image_eps == 0.0 && self.latent_eta == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, budget: f64, step: f64| {
            if !(budget.is_finite() && budget >= 0.0) {
                return Err(Error::Config(format!("{name} budget must be finite and >= 0, got {budget}")));
            }
            if budget > 0.0 && !(step > 0.0 && step <= budget) {
                return Err(Error::Config(format!(
                    "{name} step must lie in (0, {budget}], got {step}"
                )));
            }
            Ok(())
        };
        check("image", self.image_eps, self.image_step)?;
        check("latent", self.latent_eta, self.latent_step)
    }
}

/// Attack output. `delta` is the image perturbation, `lambda` the latent one
/// (`None` when the latent path was inactive). `loss_trace` is `[K + 1, n]`
/// with row 0 the loss before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample<T: Real> {
    pub x_adv: ArrayD<T>,
    pub delta: ArrayD<T>,
    pub lambda: Option<LatentCode<T>>,
    pub loss_trace: Array2<T>,
    pub success: Vec<bool>,
}

impl<T: Real> AdversarialExample<T> {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    /// Loss of each sample at the returned iterate.
    pub fn final_loss(&self) -> Array1<T> {
        self.loss_trace.row(self.loss_trace.nrows() - 1).to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    L2Pgd,
    OmPgd,
    Jsa,
    /// Latent perturbation restricted to one level (0-based).
    PerLevelJsa { level: usize },
}

impl AttackKind {
    pub fn needs_flow(&self) -> bool {
        matches!(self, AttackKind::OmPgd | AttackKind::Jsa | AttackKind::PerLevelJsa { .. })
    }
}

/// Elementwise clip to `[0, 1]`.
pub fn clip_to_range<T: Real>(x: &ArrayD<T>) -> ArrayD<T> {
    x.mapv(|v| v.max(T::zero()).min(T::one()))
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn ensure_finite<T: Real>(g: &ArrayD<T>, what: &str, iteration: usize) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            iteration,
        })
    }
}

fn per_sample_l2<T: Real>(a: &ArrayD<T>) -> Vec<T> {
    a.outer_iter()
        .map(|s| s.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

fn linf_step<T: Real>(v: &mut ArrayD<T>, g: &ArrayD<T>, step: T, bound: T) {
    Zip::from(v).and(g).for_each(|v, &g| {
        *v = (*v + step * sign(g)).max(-bound).min(bound);
    });
}

fn l2_step<T: Real>(v: &mut ArrayD<T>, g: &ArrayD<T>, step: T, bound: T) {
    let gn = per_sample_l2(g);
    for (i, mut row) in v.outer_iter_mut().enumerate() {
        if gn[i] > T::zero() && gn[i].is_finite() {
            let scale = step / gn[i];
            Zip::from(&mut row)
                .and(g.index_axis(Axis(0), i))
                .for_each(|v, &g| *v += scale * g);
        }
    }
    project_l2(v, bound);
}

fn project_l2<T: Real>(v: &mut ArrayD<T>, bound: T) {
    let norms = per_sample_l2(v);
    for (i, mut row) in v.outer_iter_mut().enumerate() {
        if norms[i] > bound {
            let scale = bound / norms[i];
            row.mapv_inplace(|x| x * scale);
        }
    }
}

fn random_delta<T: Real, R: Rng + ?Sized>(shape: &[usize], threat: &ThreatModel, rng: &mut R) -> ArrayD<T> {
    let eps = threat.image_eps;
    match threat.norm {
        Norm::Linf => {
            let u = Uniform::new_inclusive(-eps, eps).expect("eps >= 0");
            ArrayD::from_shape_simple_fn(shape, || T::of(rng.sample(u)))
        }
        Norm::L2 => {
            let mut d = ArrayD::from_shape_simple_fn(shape, || T::of(rng.sample::<f64, _>(StandardNormal)));
            let dim = d.len() / shape[0].max(1);
            let norms = per_sample_l2(&d);
            for (i, mut row) in d.outer_iter_mut().enumerate() {
                let radius = eps * rng.random::<f64>().powf(1.0 / dim as f64);
                let scale = if norms[i] > T::zero() {
                    T::of(radius) / norms[i]
                } else {
                    T::zero()
                };
                row.mapv_inplace(|x| x * scale);
            }
            d
        }
    }
}

enum Start<'a, T: Real> {
    Image(&'a ArrayD<T>),
    Latent {
        flow: &'a FlowModel<T>,
        z: &'a LatentCode<T>,
        level: Option<usize>,
    },
}

struct BestIterate<T: Real> {
    loss: Vec<T>,
    pre: ArrayD<T>,
    delta: ArrayD<T>,
    lambda: Option<LatentCode<T>>,
}

fn copy_sample<T: Real>(dst: &mut ArrayD<T>, src: &ArrayD<T>, i: usize) {
    dst.index_axis_mut(Axis(0), i).assign(&src.index_axis(Axis(0), i));
}

fn joint_attack<T: Real, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    start: Start<'_, T>,
    targets: &[TargetSpec],
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    threat.validate()?;
    let image_on = threat.image_eps > 0.0;
    let latent_on = matches!(start, Start::Latent { .. }) && threat.latent_eta > 0.0;
    let fixed_base = match &start {
        Start::Image(x) => Some((*x).clone()),
        Start::Latent { flow, z, .. } if !latent_on => Some(flow.inverse_transform(z)?),
        Start::Latent { flow, z, level } => {
            flow.check_latent(z)?;
            if let Some(l) = *level {
                if l >= z.levels.len() {
                    return Err(Error::LevelOutOfRange {
                        level: l,
                        levels: z.levels.len(),
                    });
                }
            }
            None
        }
    };
    let image_shape: Vec<usize> = match (&fixed_base, &start) {
        (Some(b), _) => b.shape().to_vec(),
        (None, Start::Latent { flow, z, .. }) => {
            let [c, h, w] = flow.config().input_shape;
            vec![z.batch_size(), c, h, w]
        }
        (None, Start::Image(_)) => unreachable!("image starts always have a base"),
    };
    let n = image_shape[0];
    model.check_input(&ArrayD::zeros(&image_shape[..]))?;
    model.validate_targets(targets, n)?;

    let eps = T::of(threat.image_eps);
    let eps_step = T::of(threat.image_step);
    let eta = T::of(threat.latent_eta);
    let eta_step = T::of(threat.latent_step);
    let k_max = threat.iterations;

    let mut delta = if image_on && threat.random_start {
        random_delta(&image_shape, threat, rng)
    } else {
        ArrayD::zeros(&image_shape[..])
    };
    let mut lambda = match &start {
        Start::Latent { z, .. } if latent_on => Some(z.zeros_like()),
        _ => None,
    };
    let mut trace = Array2::zeros((k_max + 1, n));
    let mut best: Option<BestIterate<T>> = None;
    let mut final_pre = ArrayD::zeros(&image_shape[..]);

    for k in 0..=k_max {
        let tape = Tape::new();
        let bound = model.params().bind(&tape, false);
        let dv = if image_on {
            tape.var(delta.clone())
        } else {
            tape.constant(delta.clone())
        };
        let mut lambda_vars: Vec<Option<Var<'_, T>>> = Vec::new();
        let base = match (&start, &fixed_base, &lambda) {
            (_, Some(b), _) => tape.constant(b.clone()),
            (Start::Latent { flow, z, level }, None, Some(lam)) => {
                let flow_bound = flow.params().bind(&tape, false);
                let mut inputs = Vec::with_capacity(z.levels.len());
                for (j, zl) in z.levels.iter().enumerate() {
                    let zc = tape.constant(zl.clone());
                    if level.is_none_or(|l| l == j) {
                        let lv = tape.var(lam.levels[j].clone());
                        lambda_vars.push(Some(lv));
                        inputs.push(zc + lv);
                    } else {
                        lambda_vars.push(None);
                        inputs.push(zc);
                    }
                }
                flow.decode_on_tape(&flow_bound, &inputs)?.0
            }
            _ => unreachable!("latent path without latent state"),
        };
        let pre = base + dv;
        let input = if threat.clip_in_loop {
            pre.clamp(T::zero(), T::one())
        } else {
            pre
        };
        let losses = cross_entropy_on_tape(model.logits_on_tape(&bound, input), targets);
        let loss_values = losses.to_array();
        trace.row_mut(k).assign(&loss_values.view().into_dimensionality::<ndarray::Ix1>().expect("per-sample loss"));

        if threat.best_iterate {
            let pre_values = pre.to_array();
            match best.as_mut() {
                None => {
                    best = Some(BestIterate {
                        loss: loss_values.iter().copied().collect(),
                        pre: pre_values,
                        delta: delta.clone(),
                        lambda: lambda.clone(),
                    })
                }
                Some(b) => {
                    for (i, &l) in loss_values.iter().enumerate() {
                        if l > b.loss[i] {
                            b.loss[i] = l;
                            copy_sample(&mut b.pre, &pre_values, i);
                            copy_sample(&mut b.delta, &delta, i);
                            if let (Some(bl), Some(cur)) = (b.lambda.as_mut(), lambda.as_ref()) {
                                for (dst, src) in bl.levels.iter_mut().zip(&cur.levels) {
                                    copy_sample(dst, src, i);
                                }
                            }
                        }
                    }
                }
            }
        }

        if k == k_max {
            final_pre = pre.to_array();
            break;
        }
        let mut grads = tape.backward(losses.sum());
        if image_on {
            let g = grads.wrt(dv);
            ensure_finite(&g, "image-space gradient", k)?;
            match threat.norm {
                Norm::Linf => linf_step(&mut delta, &g, eps_step, eps),
                Norm::L2 => l2_step(&mut delta, &g, eps_step, eps),
            }
        }
        if let Some(lam) = lambda.as_mut() {
            for (j, lv) in lambda_vars.iter().enumerate() {
                if let Some(lv) = lv {
                    let g = grads.wrt(*lv);
                    ensure_finite(&g, "latent-space gradient", k)?;
                    linf_step(&mut lam.levels[j], &g, eta_step, eta);
                }
            }
        }
    }

    if let Some(b) = best {
        final_pre = b.pre;
        delta = b.delta;
        lambda = b.lambda;
    }
    let x_adv = if threat.clip_output {
        clip_to_range(&final_pre)
    } else {
        final_pre
    };
    let predictions = model.predict(&x_adv)?;
    let success = predictions
        .iter()
        .zip(targets)
        .map(|(&p, t)| p != t.dominant())
        .collect();
    Ok(AdversarialExample {
        x_adv,
        delta,
        lambda,
        loss_trace: trace,
        success,
    })
}

/// Single signed-gradient step of size `eps` (L-infinity), then clip.
pub fn fgsm<T: Real>(
    model: &ClassifierModel<T>,
    x: &ArrayD<T>,
    targets: &[TargetSpec],
    eps: f64,
) -> Result<AdversarialExample<T>> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::Config(format!("FGSM budget must be finite and >= 0, got {eps}")));
    }
    let g = model.input_gradient(x, targets)?;
    let e = T::of(eps);
    let delta = g.mapv(|v| e * sign(v));
    let x_adv = clip_to_range(&(x + &delta));
    let before = model.ce_loss(x, targets)?;
    let after = model.ce_loss(&x_adv, targets)?;
    let mut loss_trace = Array2::zeros((2, x.shape()[0]));
    loss_trace.row_mut(0).assign(&before);
    loss_trace.row_mut(1).assign(&after);
    let success = model
        .predict(&x_adv)?
        .iter()
        .zip(targets)
        .map(|(&p, t)| p != t.dominant())
        .collect();
    Ok(AdversarialExample {
        x_adv,
        delta,
        lambda: None,
        loss_trace,
        success,
    })
}

/// Image-space PGD in the threat's norm; any latent budget is ignored.
pub fn pgd_attack<T: Real, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    x: &ArrayD<T>,
    targets: &[TargetSpec],
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    model.check_input(x)?;
    joint_attack(model, Start::Image(x), targets, &threat.clone().without_latent(), rng)
}

/// Image-space PGD with normalized-gradient steps and L2 projection.
pub fn l2_pgd_attack<T: Real, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    x: &ArrayD<T>,
    targets: &[TargetSpec],
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    let threat = ThreatModel {
        norm: Norm::L2,
        ..threat.clone()
    };
    pgd_attack(model, x, targets, &threat, rng)
}

/// Latent-space PGD through the generator: `clip(G(G^-1(x) + lambda))`.
pub fn om_pgd_attack<T: Real, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    flow: &FlowModel<T>,
    x: &ArrayD<T>,
    targets: &[TargetSpec],
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    jsa_attack(model, flow, x, targets, &threat.clone().without_image(), rng)
}

/// Joint image/latent attack starting from `z = G^-1(x)`.
///
/// When the latent budget is zero the generator round trip is skipped and
/// the attack runs on `x` itself.
pub fn jsa_attack<T: Real, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    flow: &FlowModel<T>,
    x: &ArrayD<T>,
    targets: &[TargetSpec],
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    flow.check_input(x)?;
    if threat.latent_eta == 0.0 {
        return joint_attack(model, Start::Image(x), targets, threat, rng);
    }
    let (z, _) = flow.forward_transform(x)?;
    jsa_attack_from_latent(model, flow, &z, targets, threat, rng)
}

/// Joint attack from a supplied latent code; the clean image is `G(z)`.
pub fn jsa_attack_from_latent<T: Real, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    flow: &FlowModel<T>,
    z: &LatentCode<T>,
    targets: &[TargetSpec],
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    joint_attack(model, Start::Latent { flow, z, level: None }, targets, threat, rng)
}

/// Joint attack whose latent perturbation touches only `level` (0-based);
/// every other level of the latent code is passed through unchanged.
pub fn per_level_jsa<T: Real, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    flow: &FlowModel<T>,
    x: &ArrayD<T>,
    targets: &[TargetSpec],
    level: usize,
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    if level >= flow.num_levels() {
        return Err(Error::LevelOutOfRange {
            level,
            levels: flow.num_levels(),
        });
    }
    let (z, _) = flow.forward_transform(x)?;
    joint_attack(
        model,
        Start::Latent {
            flow,
            z: &z,
            level: Some(level),
        },
        targets,
        threat,
        rng,
    )
}

/// Dispatches on `kind`; flow-based kinds fail without a flow.
pub fn run_attack<T: Real, R: Rng + ?Sized>(
    kind: AttackKind,
    model: &ClassifierModel<T>,
    flow: Option<&FlowModel<T>>,
    x: &ArrayD<T>,
    targets: &[TargetSpec],
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    let need_flow = || flow.ok_or_else(|| Error::Config(format!("attack {kind:?} needs a flow model")));
    match kind {
        AttackKind::Fgsm => fgsm(model, x, targets, threat.image_eps),
        AttackKind::Pgd => pgd_attack(model, x, targets, threat, rng),
        AttackKind::L2Pgd => l2_pgd_attack(model, x, targets, threat, rng),
        AttackKind::OmPgd => om_pgd_attack(model, need_flow()?, x, targets, threat, rng),
        AttackKind::Jsa => jsa_attack(model, need_flow()?, x, targets, threat, rng),
        AttackKind::PerLevelJsa { level } => per_level_jsa(model, need_flow()?, x, targets, level, threat, rng),
    }
}

/// Re-checks the budget and range invariants of an emitted example.
pub fn check_budget<T: Real>(adv: &AdversarialExample<T>, threat: &ThreatModel) -> Result<()> {
    let tol = BUDGET_TOLERANCE;
    let norms: Vec<f64> = match threat.norm {
        Norm::Linf => adv
            .delta
            .outer_iter()
            .map(|s| s.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs())))
            .collect(),
        Norm::L2 => per_sample_l2(&adv.delta).iter().map(|v| v.as_f64()).collect(),
    };
    if let Some((i, v)) = norms
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v <= threat.image_eps + tol))
    {
        return Err(Error::Budget(format!(
            "sample {i}: image perturbation norm {v} exceeds {}",
            threat.image_eps
        )));
    }
    if let Some(lam) = &adv.lambda {
        if let Some((i, v)) = lam
            .linf_norms()
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.as_f64() <= threat.latent_eta + tol))
        {
            return Err(Error::Budget(format!(
                "sample {i}: latent perturbation norm {v} exceeds {}",
                threat.latent_eta
            )));
        }
    }
    if threat.clip_output {
        if let Some(v) = adv.x_adv.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Budget(format!("pixel {v} outside [0, 1]")));
        }
    }
    Ok(())
}
