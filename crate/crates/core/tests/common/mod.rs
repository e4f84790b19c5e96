#![allow(dead_code)]

use advlab_core::attacks::{AttackKind, ThreatModel};
use advlab_core::classifier::{Architecture, ClassifierConfig};
use advlab_core::data::{synth_manifold_dataset, ClassShift, SyntheticManifoldSpec, TensorDataset};
use advlab_core::flow::{FlowConfig, FlowModel};
use advlab_core::rng::{rng_for, seeded};
use advlab_core::training::{OptimizerConfig, TrainConfig};
use advlab_core::ClassifierModel;
use nalgebra::DMatrix;
use ndarray::{arr1, Array2, ArrayD, IxDyn};
use rand::Rng;

/// Uniform images in `[lo, hi]`.
pub fn images(n: usize, shape: [usize; 3], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = seeded(seed);
    let [c, h, w] = shape;
    ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |_| rng.random_range(lo..hi))
}

pub fn random_flow(shape: [usize; 3], levels: usize, steps: usize, width: usize, seed: u64) -> FlowModel<f64> {
    let cfg = FlowConfig::new(shape)
        .with_levels(levels)
        .with_steps(steps)
        .with_hidden_width(width);
    FlowModel::random(cfg, 0.3, &mut seeded(seed)).expect("valid flow config")
}

pub fn max_abs_diff<A: Copy + Into<f64>>(a: &ArrayD<A>, b: &ArrayD<A>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x.into() - y.into()).abs())
        .fold(0.0, f64::max)
}

/// `|a - b|_2 / |b|_2`, with the denominator floored.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

pub fn scalar_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Central differences of a scalar function.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn one_image(flat: &[f64], shape: [usize; 3]) -> ArrayD<f64> {
    let [c, h, w] = shape;
    ArrayD::from_shape_vec(IxDyn(&[1, c, h, w]), flat.to_vec()).unwrap()
}

/// `log|det J|` of `x -> G^{-1}(x)` at one point, from a central-difference
/// Jacobian and a nalgebra LU determinant, plus the flat latent code.
pub fn numeric_log_det(flow: &FlowModel<f64>, x: &[f64], h: f64) -> (f64, Vec<f64>) {
    let shape = flow.config().input_shape;
    let d = x.len();
    let encode = |v: &[f64]| -> Vec<f64> { flow.encode_flat(&one_image(v, shape)).unwrap().row(0).to_vec() };
    let mut jac = DMatrix::<f64>::zeros(d, d);
    let mut p = x.to_vec();
    for j in 0..d {
        p[j] = x[j] + h;
        let up = encode(&p);
        p[j] = x[j] - h;
        let down = encode(&p);
        p[j] = x[j];
        for i in 0..d {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    (jac.determinant().abs().ln(), encode(x))
}

/// Standard normal log-density of a flat vector.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    let d = z.len() as f64;
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

/// Two-class linear model whose logit difference (class 1 minus class 0)
/// is `w.x + b`.
pub fn linear_binary(w: &[f64], b: f64) -> ClassifierModel<f64> {
    let d = w.len();
    let cfg = ClassifierConfig::new(Architecture::Linear, 2, [d, 1, 1]);
    let mut m = ClassifierModel::zeros(cfg).unwrap();
    let mut head = Array2::zeros((d, 2));
    for (i, &wi) in w.iter().enumerate() {
        head[[i, 1]] = wi;
    }
    m.params_mut().insert("head.w", head.into_dyn());
    m.params_mut().insert("head.b", arr1(&[0.0, b]).into_dyn());
    m
}

pub fn mlp(input: [usize; 3], hidden: &[usize], classes: usize, seed: u64) -> ClassifierModel<f64> {
    let cfg = ClassifierConfig::new(
        Architecture::Mlp {
            hidden: hidden.to_vec(),
        },
        classes,
        input,
    );
    ClassifierModel::new(cfg, &mut rng_for(seed, "classifier-init", 0)).unwrap()
}

/// Exact-manifold dataset small enough for unit-speed tests.
pub fn small_manifold(n: usize, seed: u64) -> (TensorDataset<f64>, FlowModel<f64>) {
    let mut spec = SyntheticManifoldSpec::affine([1, 4, 4], n, seed);
    spec.margin = 0.5;
    spec.class_shift = Some(ClassShift {
        magnitude: 0.5,
        coordinates: None,
    });
    let s = synth_manifold_dataset(&spec).unwrap();
    (s.dataset, s.generator)
}

/// Calibrated desk-scale experiment: 8x8 exact-manifold data, MLP with one
/// hidden layer of 128, budgets large enough that undefended models break.
pub struct Desk {
    pub train: TensorDataset<f64>,
    pub eval: TensorDataset<f64>,
    pub flow: FlowModel<f64>,
    pub eps: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Desk {
    pub fn new(seed: u64) -> Self {
        let (n, n_eval) = (1500, 500);
        let mut spec = SyntheticManifoldSpec::affine([1, 8, 8], n + n_eval, seed);
        spec.margin = 1.4;
        spec.class_shift = Some(ClassShift {
            magnitude: 0.6,
            coordinates: None,
        });
        let s = synth_manifold_dataset(&spec).unwrap();
        let (train, eval) = s.dataset.split_at(n).unwrap();
        Desk {
            train,
            eval,
            flow: s.generator,
            eps: 0.14,
            eta: 0.02,
            seed,
        }
    }

    pub fn model(&self) -> ClassifierModel<f64> {
        mlp([1, 8, 8], &[128], 2, self.seed)
    }

    pub fn threat(&self) -> ThreatModel {
        ThreatModel::joint(self.eps, self.eps / 4.0, self.eta, self.eta / 4.0, 10)
    }

    pub fn probe(&self) -> ThreatModel {
        ThreatModel::pgd(self.eps, self.eps / 4.0, 20)
    }

    pub fn config(&self, epochs: usize, drop: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            optimizer: OptimizerConfig {
                learning_rate: 0.05,
                drop_epochs: vec![drop],
                ..OptimizerConfig::default()
            },
            threat: self.threat(),
            attack: AttackKind::Jsa,
            mixup_tau: 0.1,
            probe_samples: self.eval.len(),
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Largest binary cross-entropy of the model `w.x + b` over the corners of
/// the box `[x - eps, x + eps]` intersected with `[0, 1]`, by enumeration.
pub fn corner_max_loss(w: &[f64], b: f64, x: &[f64], y: usize, eps: f64) -> f64 {
    let d = w.len();
    let softplus = |t: f64| if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
    (0..1usize << d)
        .map(|mask| {
            let s: f64 = (0..d)
                .map(|k| {
                    let v = if mask >> k & 1 == 1 {
                        (x[k] + eps).min(1.0)
                    } else {
                        (x[k] - eps).max(0.0)
                    };
                    w[k] * v
                })
                .sum::<f64>()
                + b;
            if y == 1 {
                softplus(-s)
            } else {
                softplus(s)
            }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Trains `model` normally for `epochs` on `data`.
pub fn normal_train(model: ClassifierModel<f64>, data: &TensorDataset<f64>, epochs: usize, seed: u64) -> ClassifierModel<f64> {
    let cfg = TrainConfig {
        epochs,
        batch_size: 32,
        optimizer: OptimizerConfig {
            learning_rate: 0.05,
            drop_epochs: vec![],
            ..OptimizerConfig::default()
        },
        probe_samples: 64,
        seed,
        ..TrainConfig::default()
    };
    advlab_core::training::train_classifier(model, None, data, None, &cfg)
        .unwrap()
        .model
}
