//! Parameter update rules and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Piecewise-constant schedule: the rate at epoch `e` (1-based) is
/// `initial * factor^(number of drop epochs <= e)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub drop_epochs: Vec<usize>,
    #[serde(default = "default_drop_factor")]
    pub drop_factor: f64,
}

fn default_drop_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            drop_epochs: Vec::new(),
            drop_factor: default_drop_factor(),
        }
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.initial > 0.0) || !self.initial.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.initial)));
        }
        if self.drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("drop epochs must be strictly increasing".into()));
        }
        if let Some(&bad) = self.drop_epochs.iter().find(|&&e| e == 0 || e > epochs) {
            return Err(Error::Config(format!("drop epoch {bad} outside [1, {epochs}]")));
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        let drops = self.drop_epochs.iter().filter(|&&d| d <= epoch).count();
        self.initial * self.drop_factor.powi(drops as i32)
    }
}

/// SGD with heavy-ball momentum and coupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamStore<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &ParamStore<T> {
        &self.velocity
    }

    pub fn with_velocity(mut self, velocity: ParamStore<T>) -> Self {
        self.velocity = velocity;
        self
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self.velocity.get_mut(name).expect("velocity for every parameter");
            ndarray::Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
                let d = g + wd * *p;
                *v = mu * *v + d;
                *p -= lr * *v;
            });
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Step count and first/second moment estimates.
    pub fn state(&self) -> (i32, &ParamStore<T>, &ParamStore<T>) {
        (self.t, &self.m, &self.v)
    }

    pub fn with_state(mut self, t: i32, m: ParamStore<T>, v: ParamStore<T>) -> Self {
        self.t = t;
        self.m = m;
        self.v = v;
        self
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment");
            let v = self.v.get_mut(name).expect("moment");
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}
