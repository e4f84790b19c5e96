//! Exact-likelihood invertible generator.
//!
//! A multi-scale Glow-style flow: every level squeezes 2x2 spatial blocks
//! into channels, applies `steps_per_level` steps of actnorm, an
//! LU-parameterized invertible 1x1 mixing layer and an affine coupling
//! layer, then factors half of the channels out as that level's latent.
//!
//! Direction convention: [`FlowModel::forward_transform`] maps images to
//! latents (the encoder, `G^-1`) and carries the log-determinant used by the
//! density; [`FlowModel::inverse_transform`] is the generator `G`.

mod layers;
mod train;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use layers::LOG_SCALE_BOUND;
pub use train::{fit_mle, fit_mle_from, FlowFit, FlowTrainConfig};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use layers::{build_plan, forward_layer, init_params, inverse_layer, Init, Layer, Pass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// `(channels, height, width)`; pixels live in `[0, 1]`.
    pub input_shape: [usize; 3],
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_steps")]
    pub steps_per_level: usize,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    /// Uniform dequantization noise during maximum-likelihood fitting only.
    #[serde(default)]
    pub dequantization_noise: bool,
    /// When set, a `logit(eps + (1 - 2 eps) x)` pre-transform maps `(0, 1)`
    /// pixels to the real line, so generated images always land in range.
    #[serde(default)]
    pub logit_eps: Option<f64>,
}

fn default_levels() -> usize {
    2
}

fn default_steps() -> usize {
    4
}

fn default_width() -> usize {
    64
}

impl FlowConfig {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self {
            input_shape,
            levels: default_levels(),
            steps_per_level: default_steps(),
            hidden_width: default_width(),
            dequantization_noise: false,
            logit_eps: None,
        }
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps_per_level = steps;
        self
    }

    pub fn with_hidden_width(mut self, width: usize) -> Self {
        self.hidden_width = width;
        self
    }

    pub fn with_logit(mut self, eps: f64) -> Self {
        self.logit_eps = Some(eps);
        self
    }

    pub fn with_dequantization(mut self, on: bool) -> Self {
        self.dequantization_noise = on;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// `[c, h, w]` of every latent level, finest first.
    pub fn level_shapes(&self) -> Result<Vec<[usize; 3]>> {
        Ok(build_plan(self)?.1)
    }

    /// Per-sample element count of every latent level.
    pub fn level_sizes(&self) -> Result<Vec<usize>> {
        Ok(self
            .level_shapes()?
            .iter()
            .map(|s| s.iter().product())
            .collect())
    }
}

/// Per-level latent tensors `(z_1, ..., z_L)`, each `[n, c_l, h_l, w_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T: Real> {
    pub levels: Vec<ArrayD<T>>,
}

impl<T: Real> LatentCode<T> {
    pub fn batch_size(&self) -> usize {
        self.levels.first().map_or(0, |l| l.shape()[0])
    }

    /// Elements per sample summed over levels.
    pub fn total_dim(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.len() / l.shape()[0].max(1))
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|l| ArrayD::zeros(l.raw_dim())).collect(),
        }
    }

    /// Elementwise sum of two codes with identical layout.
    pub fn add(&self, other: &Self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Per-sample L-infinity norm over all levels.
    pub fn linf_norms(&self) -> Vec<T> {
        let n = self.batch_size();
        (0..n)
            .map(|i| {
                self.levels
                    .iter()
                    .flat_map(|l| l.index_axis(Axis(0), i).iter().copied().collect::<Vec<_>>())
                    .fold(T::zero(), |m, v| m.max(v.abs()))
            })
            .collect()
    }
}

/// Log-density of a batch under the flow; every field is per sample, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensity<T: Real> {
    pub log_prob: Array1<T>,
    pub log_det_jacobian: Array1<T>,
    pub prior_log_prob: Array1<T>,
}

/// Tape outputs of a data-to-latent pass.
pub struct EncodedVars<'t, T: Real> {
    pub levels: Vec<Var<'t, T>>,
    pub log_det: Var<'t, T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T: Real> {
    config: FlowConfig,
    layers: Vec<Layer>,
    level_shapes: Vec<[usize; 3]>,
    params: ParamStore<T>,
    buffers: ParamStore<T>,
    initialized: bool,
}

impl<T: Real> FlowModel<T> {
    fn build<R: Rng + ?Sized>(config: FlowConfig, init: Init, rng: &mut R) -> Result<Self> {
        let (layers, level_shapes) = build_plan(&config)?;
        let (params, buffers) = init_params(&layers, config.hidden_width, init, rng);
        Ok(Self {
            config,
            layers,
            level_shapes,
            params: params.cast(),
            buffers: buffers.cast(),
            initialized: init != Init::Standard,
        })
    }

    /// Standard initialization: random rotations in the mixing layers and
    /// zero final coupling layers. Actnorm still needs [`Self::initialize`].
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Init::Standard, rng)
    }

    /// Every layer is the identity: the transform reduces to the
    /// squeeze/split reshaping with zero log-determinant.
    pub fn identity(config: FlowConfig) -> Result<Self> {
        let mut rng = crate::rng::seeded(0);
        Self::build(config, Init::Identity, &mut rng)
    }

    /// All parameters drawn at random with spread `scale`; ready to use.
    pub fn random<R: Rng + ?Sized>(config: FlowConfig, scale: f64, rng: &mut R) -> Result<Self> {
        Self::build(config, Init::Random(scale), rng)
    }

    /// Reassembles a model from stored tensors (checkpoint loading).
    pub fn from_parts(config: FlowConfig, params: ParamStore<T>, buffers: ParamStore<T>) -> Result<Self> {
        let mut rng = crate::rng::seeded(0);
        let reference = Self::build(config, Init::Identity, &mut rng)?;
        for (store, expected) in [(&params, &reference.params), (&buffers, &reference.buffers)] {
            for (name, t) in expected.iter() {
                match store.get(name) {
                    None => return Err(Error::MissingTensor(name.clone())),
                    Some(v) if v.shape() != t.shape() => {
                        return Err(Error::shape(t.shape(), v.shape()))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(Self {
            params,
            buffers,
            initialized: true,
            ..reference
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn num_levels(&self) -> usize {
        self.level_shapes.len()
    }

    pub fn level_shapes(&self) -> &[[usize; 3]] {
        &self.level_shapes
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.level_shapes.iter().map(|s| s.iter().product()).collect()
    }

    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        FlowModel {
            config: self.config.clone(),
            layers: self.layers.clone(),
            level_shapes: self.level_shapes.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            initialized: self.initialized,
        }
    }

    pub fn check_input(&self, x: &ArrayD<T>) -> Result<()> {
        let [c, h, w] = self.config.input_shape;
        if x.ndim() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::shape(
                format!("[n, {c}, {h}, {w}]"),
                x.shape(),
            ));
        }
        Ok(())
    }

    pub fn check_latent(&self, z: &LatentCode<T>) -> Result<()> {
        if z.levels.len() != self.level_shapes.len() {
            return Err(Error::shape(
                format!("{} latent levels", self.level_shapes.len()),
                format!("{} latent levels", z.levels.len()),
            ));
        }
        let n = z.batch_size();
        for (lvl, shape) in z.levels.iter().zip(&self.level_shapes) {
            if lvl.ndim() != 4 || lvl.shape()[0] != n || lvl.shape()[1..] != shape[..] {
                return Err(Error::shape(format!("[{n}, {shape:?}]"), lvl.shape()));
            }
        }
        Ok(())
    }

    /// Data-dependent actnorm initialization: each actnorm layer is set so
    /// its output over `batch` has zero mean and unit variance per channel.
    pub fn initialize(&mut self, batch: &ArrayD<T>) -> Result<()> {
        self.check_input(batch)?;
        if batch.shape()[0] == 0 {
            return Err(Error::Empty("initialization batch".into()));
        }
        for idx in 0..self.layers.len() {
            let Layer::ActNorm { name, channels, .. } = &self.layers[idx] else {
                continue;
            };
            let (name, channels) = (name.clone(), *channels);
            let tape = Tape::new();
            let bound = self.params.bind(&tape, false);
            let mut state = Pass {
                h: tape.constant(batch.clone()),
                logdet: tape.constant(ArrayD::zeros(IxDyn(&[batch.shape()[0]]))),
            };
            let mut latents = Vec::new();
            for layer in &self.layers[..idx] {
                state = forward_layer(layer, &bound, &self.buffers, state, &mut latents);
            }
            let h = state.h.value();
            let mut bias = Array1::<T>::zeros(channels);
            let mut logs = Array1::<T>::zeros(channels);
            for c in 0..channels {
                let v = h.index_axis(Axis(1), c);
                let count = T::of(v.len() as f64);
                let mean = v.sum() / count;
                let var = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / count;
                bias[c] = -mean;
                logs[c] = -(var.sqrt() + T::of(1e-6)).ln();
            }
            drop(h);
            self.params.insert(format!("{name}.bias"), bias.into_dyn());
            self.params.insert(format!("{name}.logs"), logs.into_dyn());
        }
        self.initialized = true;
        Ok(())
    }

    /// Data-to-latent pass on `tape`. `x` may be tracked (input gradients)
    /// and `bound` may hold trainable parameters.
    pub fn encode_on_tape<'t>(
        &self,
        bound: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<EncodedVars<'t, T>> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let tape = x.tape();
        let n = x.shape()[0];
        let mut state = Pass {
            h: x,
            logdet: tape.constant(ArrayD::zeros(IxDyn(&[n]))),
        };
        let mut latents = Vec::with_capacity(self.level_shapes.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            state = forward_layer(layer, bound, &self.buffers, state, &mut latents);
            let finite = state.h.value().iter().all(|v| v.is_finite())
                && state.logdet.value().iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::NumericOverflow {
                    layer: idx,
                    name: layer.label(),
                });
            }
        }
        latents.push(state.h);
        Ok(EncodedVars {
            levels: latents,
            log_det: state.logdet,
        })
    }

    /// Latent-to-data pass on `tape`; returns the image and the
    /// log-determinant of this (inverse) direction.
    pub fn decode_on_tape<'t>(
        &self,
        bound: &Bound<'t, T>,
        levels: &[Var<'t, T>],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let last = *levels.last().ok_or_else(|| Error::Empty("latent code".into()))?;
        let tape = last.tape();
        let n = last.shape()[0];
        let mut state = Pass {
            h: last,
            logdet: tape.constant(ArrayD::zeros(IxDyn(&[n]))),
        };
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            state = inverse_layer(layer, bound, &self.buffers, state, levels);
            if !state.h.value().iter().all(|v| v.is_finite()) {
                return Err(Error::NumericOverflow {
                    layer: idx,
                    name: layer.label(),
                });
            }
        }
        Ok((state.h, state.logdet))
    }

    /// Standard-normal prior log-density per sample of the encoded levels.
    pub fn prior_on_tape<'t>(&self, levels: &[Var<'t, T>]) -> Var<'t, T> {
        let d = self.config.input_dim();
        let sq = levels
            .iter()
            .map(|l| l.square().sum_per_sample())
            .reduce(|a, b| a + b)
            .expect("at least one level");
        sq.scale(T::of(-0.5))
            .offset(T::of(-0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()))
    }

    /// `G^-1(x)` with the per-sample log-determinant of that map.
    pub fn forward_transform(&self, x: &ArrayD<T>) -> Result<(LatentCode<T>, Array1<T>)> {
        self.check_input(x)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let enc = self.encode_on_tape(&bound, tape.constant(x.clone()))?;
        let levels = enc.levels.iter().map(|v| v.to_array()).collect();
        Ok((LatentCode { levels }, to_array1(enc.log_det.to_array())))
    }

    /// `G(z)`.
    pub fn inverse_transform(&self, z: &LatentCode<T>) -> Result<ArrayD<T>> {
        Ok(self.inverse_with_log_det(z)?.0)
    }

    /// `G(z)` together with the log-determinant of the latent-to-data map.
    pub fn inverse_with_log_det(&self, z: &LatentCode<T>) -> Result<(ArrayD<T>, Array1<T>)> {
        self.check_latent(z)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let levels: Vec<_> = z.levels.iter().map(|l| tape.constant(l.clone())).collect();
        let (x, logdet) = self.decode_on_tape(&bound, &levels)?;
        Ok((x.to_array(), to_array1(logdet.to_array())))
    }

    pub fn log_prob(&self, x: &ArrayD<T>) -> Result<LogDensity<T>> {
        self.check_input(x)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let enc = self.encode_on_tape(&bound, tape.constant(x.clone()))?;
        let prior = self.prior_on_tape(&enc.levels);
        let total = prior + enc.log_det;
        Ok(LogDensity {
            log_prob: to_array1(total.to_array()),
            log_det_jacobian: to_array1(enc.log_det.to_array()),
            prior_log_prob: to_array1(prior.to_array()),
        })
    }

    /// Gradient of the summed log-density with respect to the input.
    pub fn log_prob_input_gradient(&self, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        self.check_input(x)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let xv = tape.var(x.clone());
        let enc = self.encode_on_tape(&bound, xv)?;
        let total = (self.prior_on_tape(&enc.levels) + enc.log_det).sum();
        Ok(tape.backward(total).wrt(xv))
    }

    /// Flattens a latent code to `[n, d]`, levels concatenated in order.
    pub fn merge_levels(&self, z: &LatentCode<T>) -> Result<Array2<T>> {
        self.check_latent(z)?;
        Ok(merge_levels(z))
    }

    /// Inverse of [`Self::merge_levels`].
    pub fn split_levels(&self, flat: &Array2<T>) -> Result<LatentCode<T>> {
        split_levels(flat, &self.level_shapes)
    }

    pub fn encode_flat(&self, x: &ArrayD<T>) -> Result<Array2<T>> {
        Ok(merge_levels(&self.forward_transform(x)?.0))
    }

    pub fn decode_flat(&self, flat: &Array2<T>) -> Result<ArrayD<T>> {
        self.inverse_transform(&self.split_levels(flat)?)
    }

    /// Draws `n` images from the prior scaled by `temperature`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, temperature: f64, rng: &mut R) -> Result<ArrayD<T>> {
        let d = self.config.input_dim();
        let flat = Array2::from_shape_fn((n, d), |_| {
            T::of(temperature * rng.sample::<f64, _>(StandardNormal))
        });
        self.decode_flat(&flat)
    }
}

pub(crate) fn to_array1<T: Real>(a: ArrayD<T>) -> Array1<T> {
    a.into_dimensionality().expect("per-sample vector")
}

/// Concatenates per-sample flattened levels into `[n, d]`.
pub fn merge_levels<T: Real>(z: &LatentCode<T>) -> Array2<T> {
    let n = z.batch_size();
    let d = z.total_dim();
    let mut out = Array2::zeros((n, d));
    let mut offset = 0;
    for lvl in &z.levels {
        let size = lvl.len() / n.max(1);
        let flat = lvl
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, size))
            .expect("level layout");
        out.slice_mut(ndarray::s![.., offset..offset + size]).assign(&flat);
        offset += size;
    }
    out
}

/// Splits `[n, d]` into levels of the given per-sample shapes.
pub fn split_levels<T: Real>(flat: &Array2<T>, shapes: &[[usize; 3]]) -> Result<LatentCode<T>> {
    let d: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if flat.ncols() != d {
        return Err(Error::shape(format!("[n, {d}]"), flat.shape()));
    }
    let n = flat.nrows();
    let mut offset = 0;
    let mut levels = Vec::with_capacity(shapes.len());
    for s in shapes {
        let size: usize = s.iter().product();
        let part = flat
            .slice(ndarray::s![.., offset..offset + size])
            .to_owned()
            .into_shape_with_order(IxDyn(&[n, s[0], s[1], s[2]]))
            .expect("level layout");
        levels.push(part);
        offset += size;
    }
    Ok(LatentCode { levels })
}
