//! Maximum-likelihood fitting of the flow.

use ndarray::{ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FlowConfig, FlowModel};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam};
use crate::real::Real;
use crate::rng::{rng_for, Rng as SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub max_grad_norm: Option<f64>,
}

fn default_epochs() -> usize {
    10
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-3
}

fn default_clip() -> Option<f64> {
    Some(50.0)
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            max_grad_norm: default_clip(),
        }
    }
}

/// Result of [`fit_mle`]: the trained model, the mean negative
/// log-likelihood (nats per sample) before training, and the mean
/// minibatch NLL of every epoch.
#[derive(Debug, Clone)]
pub struct FlowFit<T: Real> {
    pub model: FlowModel<T>,
    pub initial_nll: f64,
    pub nll_trace: Vec<f64>,
}

/// Trains a freshly initialized flow on `images` (`[n, c, h, w]`, pixels in
/// `[0, 1]`).
pub fn fit_mle<T: Real>(images: &ArrayD<T>, config: FlowConfig, train: &FlowTrainConfig) -> Result<FlowFit<T>> {
    let model = FlowModel::new(config, &mut rng_for(train.seed, "flow-init", 0))?;
    fit_mle_from(model, images, train)
}

/// Continues training `model`; actnorm is initialized from the first batch
/// when needed.
pub fn fit_mle_from<T: Real>(
    mut model: FlowModel<T>,
    images: &ArrayD<T>,
    train: &FlowTrainConfig,
) -> Result<FlowFit<T>> {
    if train.epochs == 0 || train.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be at least 1".into()));
    }
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty("training set".into()));
    }
    model.check_input(images)?;
    for (i, sample) in images.outer_iter().enumerate() {
        if let Some(&v) = sample.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::PixelRange { index: i, value: v.as_f64() });
        }
    }
    let dequantize = model.config().dequantization_noise;
    let prepare = |idx: &[usize], rng: &mut SeededRng| -> ArrayD<T> {
        let mut batch = images.select(Axis(0), idx);
        if dequantize {
            let keep = T::of(255.0 / 256.0);
            let scale = T::of(1.0 / 256.0);
            batch.mapv_inplace(|v| v * keep + scale * T::of(rng.random::<f64>()));
        }
        batch
    };

    if !model.is_initialized() {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(train.seed, "flow-shuffle", 1));
        let take = train.batch_size.max(256).min(n);
        let batch = prepare(&order[..take], &mut rng_for(train.seed, "flow-dequant", 0));
        model.initialize(&batch)?;
    }

    let all: Vec<usize> = (0..n).collect();
    let eval = prepare(&all, &mut rng_for(train.seed, "flow-eval", 0));
    let initial_nll = -model.log_prob(&eval)?.log_prob.mean().expect("non-empty").as_f64();

    let mut adam = Adam::new(model.params());
    let mut trace = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        let mut order = all.clone();
        order.shuffle(&mut rng_for(train.seed, "flow-shuffle", epoch as u64));
        let mut noise = rng_for(train.seed, "flow-dequant", epoch as u64);
        let mut total = 0.0;
        for (b, idx) in order.chunks(train.batch_size).enumerate() {
            let batch = prepare(idx, &mut noise);
            let tape = Tape::new();
            let bound = model.params().bind(&tape, true);
            let enc = model.encode_on_tape(&bound, tape.constant(batch))?;
            let nll = (model.prior_on_tape(&enc.levels) + enc.log_det).mean().neg();
            let loss = nll.item().as_f64();
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            let mut grads = tape.backward(nll);
            let mut g = bound.gradients(&mut grads);
            if !g.all_finite() {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            if let Some(max) = train.max_grad_norm {
                clip_grad_norm(&mut g, max);
            }
            adam.step(model.params_mut(), &g, train.learning_rate);
            total += loss * idx.len() as f64;
        }
        trace.push(total / n as f64);
    }
    Ok(FlowFit {
        model,
        initial_nll,
        nll_trace: trace,
    })
}
