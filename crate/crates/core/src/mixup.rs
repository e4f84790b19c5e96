//! Input mixup and two ways of attacking a mixed batch: attacking the
//! interpolated input directly under the mixed loss, or interpolating two
//! individually attacked batches.

use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::attacks::{jsa_attack, pgd_attack, AdversarialExample, ThreatModel};
use crate::classifier::{ClassifierModel, TargetSpec};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, LatentCode};
use crate::real::Real;

/// Draws `alpha ~ Beta(tau, tau)`, redrawing until it lies strictly inside
/// `(0, 1)` (small `tau` puts mass on values that round to the endpoints).
pub fn sample_alpha<R: Rng + ?Sized>(tau: f64, rng: &mut R) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("mixup tau must be positive and finite, got {tau}")));
    }
    let beta = Beta::new(tau, tau).map_err(|e| Error::Config(format!("Beta({tau}, {tau}): {e}")))?;
    loop {
        let a = beta.sample(rng);
        if a > 0.0 && a < 1.0 {
            return Ok(a);
        }
    }
}

/// `alpha * x_i + (1 - alpha) * x_j`.
pub fn input_mixup<T: Real>(x_i: &ArrayD<T>, x_j: &ArrayD<T>, alpha: f64) -> Result<ArrayD<T>> {
    if x_i.shape() != x_j.shape() {
        return Err(Error::shape(x_i.shape(), x_j.shape()));
    }
    let a = T::of(alpha);
    let b = T::of(1.0 - alpha);
    Ok(ndarray::Zip::from(x_i).and(x_j).map_collect(|&u, &v| a * u + b * v))
}

fn mix_per_sample<T: Real>(x_i: &ArrayD<T>, x_j: &ArrayD<T>, alphas: &[f64]) -> ArrayD<T> {
    let mut out = x_i.clone();
    for (k, mut row) in out.outer_iter_mut().enumerate() {
        let (a, b) = (T::of(alphas[k]), T::of(1.0 - alphas[k]));
        ndarray::Zip::from(&mut row)
            .and(x_j.index_axis(Axis(0), k))
            .for_each(|u, &v| *u = a * *u + b * v);
    }
    out
}

/// Random pairing partner for every position of a batch of size `n`.
pub fn random_pairing<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Two paired batches, their mixing weights and the interpolated input.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupBatch<T: Real> {
    pub x_i: ArrayD<T>,
    pub x_j: ArrayD<T>,
    pub y_i: Vec<usize>,
    pub y_j: Vec<usize>,
    /// One weight per sample; all equal unless built per example.
    pub alphas: Vec<f64>,
    pub x_mix: ArrayD<T>,
}

impl<T: Real> MixupBatch<T> {
    /// One `alpha` for the whole batch.
    pub fn new(x_i: ArrayD<T>, x_j: ArrayD<T>, y_i: Vec<usize>, y_j: Vec<usize>, alpha: f64) -> Result<Self> {
        let n = x_i.shape().first().copied().unwrap_or(0);
        Self::per_example(x_i, x_j, y_i, y_j, vec![alpha; n])
    }

    pub fn per_example(
        x_i: ArrayD<T>,
        x_j: ArrayD<T>,
        y_i: Vec<usize>,
        y_j: Vec<usize>,
        alphas: Vec<f64>,
    ) -> Result<Self> {
        if x_i.shape() != x_j.shape() {
            return Err(Error::shape(x_i.shape(), x_j.shape()));
        }
        let n = x_i.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Empty("mixup batch".into()));
        }
        if y_i.len() != n || y_j.len() != n || alphas.len() != n {
            return Err(Error::shape(
                format!("{n} labels and weights"),
                format!("{}, {} labels and {} weights", y_i.len(), y_j.len(), alphas.len()),
            ));
        }
        if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("mixing weight {a} outside [0, 1]")));
        }
        let x_mix = mix_per_sample(&x_i, &x_j, &alphas);
        Ok(Self {
            x_i,
            x_j,
            y_i,
            y_j,
            alphas,
            x_mix,
        })
    }

    /// Pairs each sample of `x` with `x[perm[k]]`.
    pub fn from_permutation(x: &ArrayD<T>, y: &[usize], perm: &[usize], alpha: f64) -> Result<Self> {
        if perm.len() != y.len() {
            return Err(Error::shape(y.len(), perm.len()));
        }
        let x_j = x.select(Axis(0), perm);
        let y_j = perm.iter().map(|&p| y[p]).collect();
        Self::new(x.clone(), x_j, y.to_vec(), y_j, alpha)
    }

    pub fn len(&self) -> usize {
        self.y_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_i.is_empty()
    }

    /// Mixed targets `alpha * CE(y_i) + (1 - alpha) * CE(y_j)`.
    pub fn targets(&self) -> Vec<TargetSpec> {
        self.y_i
            .iter()
            .zip(&self.y_j)
            .zip(&self.alphas)
            .map(|((&first, &second), &alpha)| TargetSpec::Mixed { first, second, alpha })
            .collect()
    }
}

/// Per-sample mixed loss of `model` at `x`.
pub fn mixup_loss<T: Real>(model: &ClassifierModel<T>, x: &ArrayD<T>, batch: &MixupBatch<T>) -> Result<Array1<T>> {
    model.ce_loss(x, &batch.targets())
}

/// Attacks the interpolated input under the mixed loss: JSA through `flow`
/// when given, image-space PGD otherwise. Nothing is interpolated after the
/// attack.
pub fn robust_mixup_attack<T: Real, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    flow: Option<&FlowModel<T>>,
    batch: &MixupBatch<T>,
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    let targets = batch.targets();
    match flow {
        Some(flow) => jsa_attack(model, flow, &batch.x_mix, &targets, threat, rng),
        None => pgd_attack(model, &batch.x_mix, &targets, threat, rng),
    }
}

/// Attack used on each member in [`iat_baseline_mix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberAttack {
    #[default]
    Pgd,
    Jsa,
}

/// Attacks `x_i` and `x_j` separately with their hard labels, then mixes the
/// attacked images with the batch weights. The trace has two rows: the mixed
/// loss at the clean interpolation and at the returned point.
pub fn iat_baseline_mix<T: Real, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    flow: Option<&FlowModel<T>>,
    batch: &MixupBatch<T>,
    threat: &ThreatModel,
    member: MemberAttack,
    rng: &mut R,
) -> Result<AdversarialExample<T>> {
    let attack = |x: &ArrayD<T>, y: &[usize], rng: &mut R| match (member, flow) {
        (MemberAttack::Jsa, Some(flow)) => jsa_attack(model, flow, x, &TargetSpec::hard(y), threat, rng),
        (MemberAttack::Jsa, None) => Err(Error::Config("JSA member attack needs a flow model".into())),
        (MemberAttack::Pgd, _) => pgd_attack(model, x, &TargetSpec::hard(y), threat, rng),
    };
    let adv_i = attack(&batch.x_i, &batch.y_i, rng)?;
    let adv_j = attack(&batch.x_j, &batch.y_j, rng)?;
    let x_adv = mix_per_sample(&adv_i.x_adv, &adv_j.x_adv, &batch.alphas);
    let delta = mix_per_sample(&adv_i.delta, &adv_j.delta, &batch.alphas);
    let lambda = match (&adv_i.lambda, &adv_j.lambda) {
        (Some(a), Some(b)) => Some(LatentCode {
            levels: a
                .levels
                .iter()
                .zip(&b.levels)
                .map(|(u, v)| mix_per_sample(u, v, &batch.alphas))
                .collect(),
        }),
        _ => None,
    };
    let targets = batch.targets();
    let mut loss_trace = Array2::zeros((2, batch.len()));
    loss_trace.row_mut(0).assign(&model.ce_loss(&batch.x_mix, &targets)?);
    loss_trace.row_mut(1).assign(&model.ce_loss(&x_adv, &targets)?);
    let success = model
        .predict(&x_adv)?
        .iter()
        .zip(&targets)
        .map(|(&p, t)| p != t.dominant())
        .collect();
    Ok(AdversarialExample {
        x_adv,
        delta,
        lambda,
        loss_trace,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{Architecture, ClassifierConfig};
    use crate::rng::seeded;
    use ndarray::IxDyn;

    #[test]
    fn alpha_moments_small_tau() {
        let mut rng = seeded(0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_alpha(0.1, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert!((var - 1.0 / (4.0 * 1.2)).abs() < 0.01, "{var}");
        assert!(draws.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn alpha_large_tau_concentrates() {
        let mut rng = seeded(1);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_alpha(100.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(var < 0.01);
    }

    #[test]
    fn alpha_is_reproducible_and_validated() {
        let a: Vec<f64> = {
            let mut r = seeded(4);
            (0..5).map(|_| sample_alpha(0.1, &mut r).unwrap()).collect()
        };
        let b: Vec<f64> = {
            let mut r = seeded(4);
            (0..5).map(|_| sample_alpha(0.1, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
        assert!(sample_alpha(0.0, &mut seeded(0)).unwrap_err().is_config());
        assert!(sample_alpha(-1.0, &mut seeded(0)).is_err());
    }

    #[test]
    fn mixup_endpoints_and_arithmetic() {
        let a = ArrayD::from_elem(IxDyn(&[2, 1, 2, 2]), 0.2f64);
        let b = ArrayD::from_elem(IxDyn(&[2, 1, 2, 2]), 0.6);
        assert_eq!(input_mixup(&a, &b, 1.0).unwrap(), a);
        assert_eq!(input_mixup(&a, &b, 0.0).unwrap(), b);
        assert_eq!(input_mixup(&a, &a, 0.37).unwrap(), a);
        let half = input_mixup(&a, &b, 0.5).unwrap();
        assert!(half.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(input_mixup(&a, &ArrayD::zeros(IxDyn(&[2, 1, 2, 1])), 0.5).is_err());
    }

    #[test]
    fn unit_alpha_robust_mixup_is_plain_attack() {
        let cfg = ClassifierConfig::new(Architecture::Mlp { hidden: vec![6] }, 3, [1, 2, 2]);
        let m = ClassifierModel::<f64>::new(cfg, &mut seeded(3)).unwrap();
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 1, 2, 2]), |i| 0.1 + 0.2 * ((i[0] + i[2] + i[3]) % 4) as f64);
        let y = vec![0, 1, 2, 1];
        let batch = MixupBatch::from_permutation(&x, &y, &[1, 2, 3, 0], 1.0).unwrap();
        let threat = ThreatModel::pgd(0.1, 0.025, 5);
        let mixed = robust_mixup_attack(&m, None, &batch, &threat, &mut seeded(0)).unwrap();
        let plain = pgd_attack(&m, &x, &TargetSpec::hard(&y), &threat, &mut seeded(0)).unwrap();
        assert_eq!(mixed.x_adv, plain.x_adv);
        assert_eq!(mixed.loss_trace, plain.loss_trace);
    }

    #[test]
    fn baseline_with_unit_alpha_is_member_attack() {
        let cfg = ClassifierConfig::new(Architecture::Linear, 2, [1, 1, 3]);
        let m = ClassifierModel::<f64>::new(cfg, &mut seeded(8)).unwrap();
        let x = ArrayD::from_shape_fn(IxDyn(&[3, 1, 1, 3]), |i| 0.3 + 0.1 * i[3] as f64 + 0.05 * i[0] as f64);
        let y = vec![0, 1, 1];
        let batch = MixupBatch::from_permutation(&x, &y, &[2, 0, 1], 1.0).unwrap();
        let threat = ThreatModel::pgd(0.05, 0.05, 2);
        let base = iat_baseline_mix(&m, None, &batch, &threat, MemberAttack::Pgd, &mut seeded(0)).unwrap();
        let plain = pgd_attack(&m, &x, &TargetSpec::hard(&y), &threat, &mut seeded(0)).unwrap();
        assert_eq!(base.x_adv, plain.x_adv);
        let linf = base.delta.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(linf <= 0.05 + 1e-12);
    }
}
