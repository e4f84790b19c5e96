//! Differentiable multi-class classifiers with hard- and mixed-label
//! cross-entropy.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Single affine layer on the flattened image.
    Linear,
    /// ReLU multilayer perceptron with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// Four 3x3 convolutions (2x2 average pooling after the second when the
    /// map is large enough), global average pooling and a linear head.
    ConvNet { widths: [usize; 4] },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::ConvNet {
            widths: [16, 16, 32, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    #[serde(default)]
    pub architecture: Architecture,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
}

impl ClassifierConfig {
    pub fn new(architecture: Architecture, num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self {
            architecture,
            num_classes,
            input_shape,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("empty input shape {:?}", self.input_shape)));
        }
        match &self.architecture {
            Architecture::Mlp { hidden } if hidden.contains(&0) => {
                Err(Error::Config("MLP hidden widths must be positive".into()))
            }
            Architecture::ConvNet { widths } if widths.contains(&0) => {
                Err(Error::Config("conv widths must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Training target of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TargetSpec {
    Hard(usize),
    /// `alpha * CE(first) + (1 - alpha) * CE(second)`.
    Mixed { first: usize, second: usize, alpha: f64 },
}

impl TargetSpec {
    /// Label carrying the larger weight.
    pub fn dominant(&self) -> usize {
        match *self {
            TargetSpec::Hard(y) => y,
            TargetSpec::Mixed { first, second, alpha } => {
                if alpha >= 0.5 {
                    first
                } else {
                    second
                }
            }
        }
    }

    pub fn hard(labels: &[usize]) -> Vec<TargetSpec> {
        labels.iter().map(|&y| TargetSpec::Hard(y)).collect()
    }
}

fn validate_targets(targets: &[TargetSpec], n: usize, num_classes: usize) -> Result<()> {
    if targets.len() != n {
        return Err(Error::shape(format!("{n} targets"), format!("{} targets", targets.len())));
    }
    for t in targets {
        let labels = match *t {
            TargetSpec::Hard(y) => [y, y],
            TargetSpec::Mixed { first, second, alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("mixing weight {alpha} outside [0, 1]")));
                }
                [first, second]
            }
        };
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
    }
    Ok(())
}

/// Per-sample cross-entropy of `logits` (`[n, k]`) against `targets`.
pub fn cross_entropy_on_tape<'t, T: Real>(logits: Var<'t, T>, targets: &[TargetSpec]) -> Var<'t, T> {
    let logp = logits.log_softmax();
    let all_hard = targets.iter().all(|t| matches!(t, TargetSpec::Hard(_)));
    let first: Vec<usize> = targets
        .iter()
        .map(|t| match *t {
            TargetSpec::Hard(y) => y,
            TargetSpec::Mixed { first, .. } => first,
        })
        .collect();
    if all_hard {
        return logp.gather(&first).neg();
    }
    let second: Vec<usize> = targets
        .iter()
        .map(|t| match *t {
            TargetSpec::Hard(y) => y,
            TargetSpec::Mixed { second, .. } => second,
        })
        .collect();
    let weights: Vec<(T, T)> = targets
        .iter()
        .map(|t| match *t {
            TargetSpec::Hard(_) => (T::one(), T::zero()),
            TargetSpec::Mixed { alpha, .. } => (T::of(alpha), T::of(1.0 - alpha)),
        })
        .collect();
    let tape = logits.tape();
    let a = tape.constant(Array1::from_iter(weights.iter().map(|w| w.0)).into_dyn());
    let b = tape.constant(Array1::from_iter(weights.iter().map(|w| w.1)).into_dyn());
    (a * logp.gather(&first) + b * logp.gather(&second)).neg()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel<T: Real> {
    config: ClassifierConfig,
    params: ParamStore<T>,
}

fn he<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> ArrayD<f64> {
    let std = (gain / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| std * rng.sample::<f64, _>(StandardNormal))
}

impl<T: Real> ClassifierModel<T> {
    /// Randomly initialized model (He-normal weights, zero biases).
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::<f64>::new();
        let [c, h, w] = config.input_shape;
        let k = config.num_classes;
        match &config.architecture {
            Architecture::Linear => {
                p.insert("head.w", he(&[c * h * w, k], c * h * w, 1.0, rng));
                p.insert("head.b", ArrayD::zeros(IxDyn(&[k])));
            }
            Architecture::Mlp { hidden } => {
                let mut fan = c * h * w;
                for (i, &width) in hidden.iter().enumerate() {
                    p.insert(format!("fc{i}.w"), he(&[fan, width], fan, 2.0, rng));
                    p.insert(format!("fc{i}.b"), ArrayD::zeros(IxDyn(&[width])));
                    fan = width;
                }
                p.insert("head.w", he(&[fan, k], fan, 1.0, rng));
                p.insert("head.b", ArrayD::zeros(IxDyn(&[k])));
            }
            Architecture::ConvNet { widths } => {
                let mut cin = c;
                for (i, &width) in widths.iter().enumerate() {
                    p.insert(format!("conv{i}.w"), he(&[width, cin, 3, 3], cin * 9, 2.0, rng));
                    p.insert(format!("conv{i}.b"), ArrayD::zeros(IxDyn(&[width])));
                    cin = width;
                }
                p.insert("head.w", he(&[cin, k], cin, 1.0, rng));
                p.insert("head.b", ArrayD::zeros(IxDyn(&[k])));
            }
        }
        Ok(Self {
            config,
            params: p.cast(),
        })
    }

    /// Every parameter zero: constant all-zero logits.
    pub fn zeros(config: ClassifierConfig) -> Result<Self> {
        let model = Self::new(config, &mut crate::rng::seeded(0))?;
        Ok(Self {
            params: model.params.zeros_like(),
            ..model
        })
    }

    /// Reassembles a model from stored tensors.
    pub fn from_parts(config: ClassifierConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::zeros(config)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                None => return Err(Error::MissingTensor(name.clone())),
                Some(v) if v.shape() != t.shape() => return Err(Error::shape(t.shape(), v.shape())),
                Some(_) => {}
            }
        }
        Ok(Self { params, ..reference })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> ClassifierModel<U> {
        ClassifierModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_input(&self, x: &ArrayD<T>) -> Result<()> {
        let [c, h, w] = self.config.input_shape;
        if x.ndim() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::shape(format!("[n, {c}, {h}, {w}]"), x.shape()));
        }
        Ok(())
    }

    /// Logits `[n, k]` for an image batch variable `[n, c, h, w]`.
    pub fn logits_on_tape<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let n = x.shape()[0];
        let d: usize = self.config.input_shape.iter().product();
        match &self.config.architecture {
            Architecture::Linear => x
                .reshape(&[n, d])
                .matmul(p.get("head.w"))
                .add_along(p.get("head.b"), 1),
            Architecture::Mlp { hidden } => {
                let mut h = x.reshape(&[n, d]);
                for i in 0..hidden.len() {
                    h = h
                        .matmul(p.get(&format!("fc{i}.w")))
                        .add_along(p.get(&format!("fc{i}.b")), 1)
                        .relu();
                }
                h.matmul(p.get("head.w")).add_along(p.get("head.b"), 1)
            }
            Architecture::ConvNet { .. } => {
                let mut h = x;
                for i in 0..4 {
                    h = h
                        .conv2d(p.get(&format!("conv{i}.w")), 1)
                        .add_along(p.get(&format!("conv{i}.b")), 1)
                        .relu();
                    let s = h.shape();
                    if i == 1 && s[2] >= 4 && s[3] >= 4 && s[2] % 2 == 0 && s[3] % 2 == 0 {
                        h = h.avg_pool2();
                    }
                }
                h.global_avg_pool()
                    .matmul(p.get("head.w"))
                    .add_along(p.get("head.b"), 1)
            }
        }
    }

    pub fn predict_logits(&self, x: &ArrayD<T>) -> Result<Array2<T>> {
        self.check_input(x)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let logits = self.logits_on_tape(&bound, tape.constant(x.clone())).to_array();
        Ok(logits.into_dimensionality().expect("[n, k] logits"))
    }

    /// Arg-max class per sample; ties resolve to the lowest index.
    pub fn predict(&self, x: &ArrayD<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_logits(x)?))
    }

    /// Per-sample cross-entropy.
    pub fn ce_loss(&self, x: &ArrayD<T>, targets: &[TargetSpec]) -> Result<Array1<T>> {
        self.check_input(x)?;
        validate_targets(targets, x.shape()[0], self.config.num_classes)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let logits = self.logits_on_tape(&bound, tape.constant(x.clone()));
        let loss = cross_entropy_on_tape(logits, targets).to_array();
        Ok(loss.into_dimensionality().expect("per-sample loss"))
    }

    /// Gradient of the summed per-sample loss with respect to the input.
    pub fn input_gradient(&self, x: &ArrayD<T>, targets: &[TargetSpec]) -> Result<ArrayD<T>> {
        self.check_input(x)?;
        validate_targets(targets, x.shape()[0], self.config.num_classes)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let xv = tape.var(x.clone());
        let loss = cross_entropy_on_tape(self.logits_on_tape(&bound, xv), targets).sum();
        let g = tape.backward(loss).wrt(xv);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "input gradient".into(),
                iteration: 0,
            });
        }
        Ok(g)
    }

    /// Mean batch loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, x: &ArrayD<T>, targets: &[TargetSpec]) -> Result<(T, ParamStore<T>)> {
        self.check_input(x)?;
        validate_targets(targets, x.shape()[0], self.config.num_classes)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, true);
        let logits = self.logits_on_tape(&bound, tape.constant(x.clone()));
        let loss = cross_entropy_on_tape(logits, targets).mean();
        let value = loss.item();
        let mut grads = tape.backward(loss);
        Ok((value, bound.gradients(&mut grads)))
    }

    pub fn validate_targets(&self, targets: &[TargetSpec], n: usize) -> Result<()> {
        validate_targets(targets, n, self.config.num_classes)
    }
}

pub fn argmax_rows<T: Real>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::{arr2, Array};

    fn linear2(w: [[f64; 2]; 2], b: [f64; 2]) -> ClassifierModel<f64> {
        let cfg = ClassifierConfig::new(Architecture::Linear, 2, [2, 1, 1]);
        let mut m = ClassifierModel::zeros(cfg).unwrap();
        // head.w is [d, k]
        m.params_mut()
            .insert("head.w", arr2(&[[w[0][0], w[1][0]], [w[0][1], w[1][1]]]).into_dyn());
        m.params_mut().insert("head.b", ndarray::arr1(&b).into_dyn());
        m
    }

    #[test]
    fn zero_model_gives_zero_logits_and_gradient() {
        let cfg = ClassifierConfig::new(Architecture::Mlp { hidden: vec![5] }, 3, [1, 2, 2]);
        let m = ClassifierModel::<f64>::zeros(cfg).unwrap();
        let x = Array::from_elem(IxDyn(&[4, 1, 2, 2]), 0.3);
        let logits = m.predict_logits(&x).unwrap();
        assert_eq!(logits.shape(), &[4, 3]);
        assert!(logits.iter().all(|&v| v == 0.0));
        let g = m.input_gradient(&x, &TargetSpec::hard(&[0, 1, 2, 0])).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_logits_by_hand() {
        let m = linear2([[1.0, -2.0], [0.5, 3.0]], [0.25, -1.0]);
        let x = Array::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![2.0, 1.0]).unwrap();
        let l = m.predict_logits(&x).unwrap();
        assert!((l[[0, 0]] - (2.0 - 2.0 + 0.25)).abs() < 1e-15);
        assert!((l[[0, 1]] - (1.0 + 3.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let cfg = ClassifierConfig::new(Architecture::Linear, 10, [1, 1, 3]);
        let m = ClassifierModel::<f64>::zeros(cfg).unwrap();
        let x = Array::from_elem(IxDyn(&[2, 1, 1, 3]), 0.7);
        let loss = m.ce_loss(&x, &TargetSpec::hard(&[3, 9])).unwrap();
        for v in loss {
            assert!((v - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_target_is_convex_combination() {
        // logits for a 3-class linear model with identity weights: logits = x
        let cfg = ClassifierConfig::new(Architecture::Linear, 3, [3, 1, 1]);
        let mut m = ClassifierModel::<f64>::zeros(cfg).unwrap();
        m.params_mut().insert("head.w", Array2::<f64>::eye(3).into_dyn());
        let logits = [1.0, 2.0, 0.5];
        let x = Array::from_shape_vec(IxDyn(&[1, 3, 1, 1]), logits.to_vec()).unwrap();
        let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let ce = |y: usize| lse - logits[y];
        let expected = 0.3 * ce(0) + 0.7 * ce(2);
        let got = m
            .ce_loss(&x, &[TargetSpec::Mixed { first: 0, second: 2, alpha: 0.3 }])
            .unwrap();
        assert!((got[0] - expected).abs() < 1e-12);

        let hard = m.ce_loss(&x, &[TargetSpec::Hard(1)]).unwrap();
        let one = m
            .ce_loss(&x, &[TargetSpec::Mixed { first: 1, second: 2, alpha: 1.0 }])
            .unwrap();
        let zero = m
            .ce_loss(&x, &[TargetSpec::Mixed { first: 0, second: 1, alpha: 0.0 }])
            .unwrap();
        assert_eq!(hard[0], one[0]);
        assert_eq!(hard[0], zero[0]);
    }

    #[test]
    fn logistic_input_gradient_closed_form() {
        let m = linear2([[0.3, -1.2], [1.1, 0.4]], [0.2, -0.5]);
        let x = Array::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![0.7, -0.2]).unwrap();
        for y in 0..2 {
            let g = m.input_gradient(&x, &[TargetSpec::Hard(y)]).unwrap();
            // two-class softmax = logistic on the logit difference
            let w = [1.1 - 0.3, 0.4 + 1.2];
            let margin: f64 = w[0] * 0.7 + w[1] * -0.2 + (-0.5 - 0.2);
            let p1 = 1.0 / (1.0 + (-margin).exp());
            for j in 0..2 {
                let expected = (p1 - y as f64) * w[j];
                assert!((g.as_slice().unwrap()[j] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let cfg = ClassifierConfig::new(Architecture::Linear, 3, [1, 1, 2]);
        let m = ClassifierModel::<f64>::zeros(cfg).unwrap();
        let x = Array::zeros(IxDyn(&[1, 1, 1, 2]));
        assert!(matches!(
            m.ce_loss(&x, &[TargetSpec::Hard(3)]),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
        assert!(m.predict(&Array::zeros(IxDyn(&[1, 2, 1, 1]))).is_err());
    }

    #[test]
    fn conv_net_shapes() {
        let cfg = ClassifierConfig::new(Architecture::default(), 10, [3, 8, 8]);
        let m = ClassifierModel::<f32>::new(cfg, &mut seeded(1)).unwrap();
        let x = Array::from_elem(IxDyn(&[5, 3, 8, 8]), 0.5f32);
        assert_eq!(m.predict_logits(&x).unwrap().shape(), &[5, 10]);
    }
}
