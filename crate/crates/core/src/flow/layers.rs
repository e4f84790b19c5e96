//! Layer plan of the multi-scale flow and the per-layer transforms in both
//! directions.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::FlowConfig;
use crate::autodiff::{lu_factors, lu_weight, Var};
use crate::error::{Error, Result};
use crate::linalg::{inv_unit_lower, inv_upper, plu, random_orthogonal};
use crate::params::{Bound, ParamStore};
use crate::real::Real;

/// Bound on the coupling log-scale; applied as `C * tanh(raw / C)` in both
/// directions.
pub const LOG_SCALE_BOUND: f64 = 7.0;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Logit { eps: f64 },
    Squeeze,
    ActNorm { name: String, channels: usize, spatial: usize },
    InvConv { name: String, channels: usize, spatial: usize },
    Coupling { name: String, channels: usize, cond: usize, kernel: usize },
    Split { level: usize, keep: usize },
}

impl Layer {
    pub(crate) fn label(&self) -> String {
        match self {
            Layer::Logit { .. } => "logit".into(),
            Layer::Squeeze => "squeeze".into(),
            Layer::ActNorm { name, .. } | Layer::InvConv { name, .. } | Layer::Coupling { name, .. } => {
                name.clone()
            }
            Layer::Split { level, .. } => format!("split{}", level + 1),
        }
    }
}

/// Simulates the squeeze/split bookkeeping: returns the layer sequence and
/// the `[c, h, w]` shape of every latent level.
pub(crate) fn build_plan(cfg: &FlowConfig) -> Result<(Vec<Layer>, Vec<[usize; 3]>)> {
    if cfg.levels == 0 || cfg.steps_per_level == 0 || cfg.hidden_width == 0 {
        return Err(Error::Config(
            "levels, steps_per_level and hidden_width must be positive".into(),
        ));
    }
    let [mut c, mut h, mut w] = cfg.input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("empty input shape {:?}", cfg.input_shape)));
    }
    let mut layers = Vec::new();
    let mut latents = Vec::new();
    if let Some(eps) = cfg.logit_eps {
        if !(0.0..0.5).contains(&eps) {
            return Err(Error::Config(format!("logit_eps {eps} outside [0, 0.5)")));
        }
        layers.push(Layer::Logit { eps });
    }
    for level in 0..cfg.levels {
        if h > 1 || w > 1 {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "level {} cannot squeeze a {h}x{w} map; input spatial size must be divisible by 2^levels",
                    level + 1
                )));
            }
            layers.push(Layer::Squeeze);
            c *= 4;
            h /= 2;
            w /= 2;
        }
        if c < 2 {
            return Err(Error::Config(format!(
                "level {} has {c} channel(s); coupling needs at least 2",
                level + 1
            )));
        }
        let kernel = if h > 1 || w > 1 { 3 } else { 1 };
        for step in 0..cfg.steps_per_level {
            let base = format!("l{level}.s{step}");
            layers.push(Layer::ActNorm {
                name: format!("{base}.actnorm"),
                channels: c,
                spatial: h * w,
            });
            layers.push(Layer::InvConv {
                name: format!("{base}.invconv"),
                channels: c,
                spatial: h * w,
            });
            layers.push(Layer::Coupling {
                name: format!("{base}.coupling"),
                channels: c,
                cond: c / 2,
                kernel,
            });
        }
        if level + 1 < cfg.levels {
            if c % 2 != 0 {
                return Err(Error::Config(format!(
                    "level {} has an odd channel count {c} and cannot split",
                    level + 1
                )));
            }
            let keep = c / 2;
            latents.push([c - keep, h, w]);
            layers.push(Layer::Split { level, keep });
            c = keep;
        } else {
            latents.push([c, h, w]);
        }
    }
    Ok((layers, latents))
}

fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// How parameters are initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Every layer is exactly the identity.
    Identity,
    /// Glow defaults: random rotation in the 1x1 mixing layers, zero final
    /// coupling layer, actnorm pending data-dependent initialization.
    Standard,
    /// Every parameter perturbed with the given scale.
    Random(f64),
}

pub(crate) fn init_params<R: Rng + ?Sized>(
    layers: &[Layer],
    hidden: usize,
    init: Init,
    rng: &mut R,
) -> (ParamStore<f64>, ParamStore<f64>) {
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for layer in layers {
        match layer {
            Layer::ActNorm { name, channels, .. } => {
                let (bias, logs) = match init {
                    Init::Random(s) => (normal(&[*channels], s, rng), normal(&[*channels], s, rng)),
                    _ => (
                        ArrayD::zeros(IxDyn(&[*channels])),
                        ArrayD::zeros(IxDyn(&[*channels])),
                    ),
                };
                params.insert(format!("{name}.bias"), bias);
                params.insert(format!("{name}.logs"), logs);
            }
            Layer::InvConv { name, channels, .. } => {
                let c = *channels;
                let (perm, lower, upper, sign, log_s) = if init == Init::Identity {
                    (
                        (0..c).collect::<Vec<_>>(),
                        Array2::zeros((c, c)),
                        Array2::zeros((c, c)),
                        vec![1.0; c],
                        Array1::zeros(c),
                    )
                } else {
                    let q = random_orthogonal(c, rng);
                    let (perm, l, u) = plu(&q);
                    let mut lower = Array2::zeros((c, c));
                    let mut upper = Array2::zeros((c, c));
                    for i in 0..c {
                        for j in 0..c {
                            if j < i {
                                lower[[i, j]] = l[[i, j]];
                            } else if j > i {
                                upper[[i, j]] = u[[i, j]];
                            }
                        }
                    }
                    let sign = (0..c).map(|i| u[[i, i]].signum()).collect();
                    let mut log_s = Array1::from_iter((0..c).map(|i| u[[i, i]].abs().ln()));
                    if let Init::Random(s) = init {
                        log_s += &normal(&[c], s, rng).into_dimensionality::<ndarray::Ix1>().expect("1-D");
                    }
                    (perm, lower, upper, sign, log_s)
                };
                params.insert(format!("{name}.lower"), lower.into_dyn());
                params.insert(format!("{name}.upper"), upper.into_dyn());
                params.insert(format!("{name}.log_s"), log_s.into_dyn());
                buffers.insert(
                    format!("{name}.perm"),
                    Array1::from_iter(perm.iter().map(|&p| p as f64)).into_dyn(),
                );
                buffers.insert(format!("{name}.sign"), Array1::from(sign).into_dyn());
            }
            Layer::Coupling { name, channels, cond, kernel } => {
                let (ca, cb, k) = (*cond, channels - cond, *kernel);
                let fan1 = (ca * k * k) as f64;
                let fan2 = hidden as f64;
                let fan3 = (hidden * k * k) as f64;
                let identity = init == Init::Identity;
                let std = |fan: f64| if identity { 0.0 } else { fan.sqrt().recip() };
                params.insert(format!("{name}.conv1.w"), normal(&[hidden, ca, k, k], std(fan1), rng));
                params.insert(format!("{name}.conv1.b"), ArrayD::zeros(IxDyn(&[hidden])));
                params.insert(format!("{name}.conv2.w"), normal(&[hidden, hidden, 1, 1], std(fan2), rng));
                params.insert(format!("{name}.conv2.b"), ArrayD::zeros(IxDyn(&[hidden])));
                let (w3, b3) = match init {
                    Init::Random(s) => (
                        normal(&[2 * cb, hidden, k, k], s / fan3.sqrt(), rng),
                        normal(&[2 * cb], 0.1 * s, rng),
                    ),
                    _ => (
                        ArrayD::zeros(IxDyn(&[2 * cb, hidden, k, k])),
                        ArrayD::zeros(IxDyn(&[2 * cb])),
                    ),
                };
                params.insert(format!("{name}.conv3.w"), w3);
                params.insert(format!("{name}.conv3.b"), b3);
            }
            Layer::Logit { .. } | Layer::Squeeze | Layer::Split { .. } => {}
        }
    }
    (params, buffers)
}

fn invconv_buffers<T: Real>(buffers: &ParamStore<T>, name: &str) -> (Vec<usize>, Vec<T>) {
    let perm = buffers
        .tensor(&format!("{name}.perm"))
        .iter()
        .map(|v| v.as_f64().round() as usize)
        .collect();
    let sign = buffers.tensor(&format!("{name}.sign")).iter().copied().collect();
    (perm, sign)
}

fn coupling_net<'t, T: Real>(p: &Bound<'t, T>, name: &str, xa: Var<'t, T>, kernel: usize) -> Var<'t, T> {
    let pad = kernel / 2;
    let h = xa
        .conv2d(p.get(&format!("{name}.conv1.w")), pad)
        .add_along(p.get(&format!("{name}.conv1.b")), 1)
        .relu();
    let h = h
        .conv2d(p.get(&format!("{name}.conv2.w")), 0)
        .add_along(p.get(&format!("{name}.conv2.b")), 1)
        .relu();
    h.conv2d(p.get(&format!("{name}.conv3.w")), pad)
        .add_along(p.get(&format!("{name}.conv3.b")), 1)
}

fn coupling_terms<'t, T: Real>(
    p: &Bound<'t, T>,
    name: &str,
    xa: Var<'t, T>,
    cb: usize,
    kernel: usize,
) -> (Var<'t, T>, Var<'t, T>) {
    let out = coupling_net(p, name, xa, kernel);
    let bound = T::of(LOG_SCALE_BOUND);
    let log_scale = out.narrow(1, 0, cb).scale(bound.recip()).tanh().scale(bound);
    let shift = out.narrow(1, cb, cb);
    (log_scale, shift)
}

/// Running state of a pass through the plan.
pub(crate) struct Pass<'t, T: Real> {
    pub h: Var<'t, T>,
    pub logdet: Var<'t, T>,
}

/// Applies `layer` in the data-to-latent direction. Factored-out levels are
/// pushed onto `latents`.
pub(crate) fn forward_layer<'t, T: Real>(
    layer: &Layer,
    p: &Bound<'t, T>,
    buffers: &ParamStore<T>,
    state: Pass<'t, T>,
    latents: &mut Vec<Var<'t, T>>,
) -> Pass<'t, T> {
    let Pass { h, logdet } = state;
    match layer {
        Layer::Logit { eps } => {
            let eps = T::of(*eps);
            let one = T::one();
            let range = one - eps - eps;
            let d = h.value().len() / h.shape()[0];
            let prob = h.scale(range).offset(eps);
            let log_p = prob.ln();
            let log_q = prob.neg().offset(one).ln();
            let y = log_p - log_q;
            let jac = (log_p + log_q)
                .sum_per_sample()
                .neg()
                .offset(T::of(d as f64) * range.ln());
            Pass { h: y, logdet: logdet + jac }
        }
        Layer::Squeeze => Pass {
            h: h.space_to_depth(),
            logdet,
        },
        Layer::ActNorm { name, spatial, .. } => {
            let bias = p.get(&format!("{name}.bias"));
            let logs = p.get(&format!("{name}.logs"));
            let y = h.add_along(bias, 1).mul_along(logs.exp(), 1);
            let jac = logs.sum().scale(T::of(*spatial as f64));
            Pass {
                h: y,
                logdet: logdet.add_scalar(jac),
            }
        }
        Layer::InvConv { name, spatial, .. } => {
            let (perm, sign) = invconv_buffers(buffers, name);
            let log_s = p.get(&format!("{name}.log_s"));
            let w = lu_weight(
                p.get(&format!("{name}.lower")),
                p.get(&format!("{name}.upper")),
                log_s,
                &perm,
                &sign,
            );
            let jac = log_s.sum().scale(T::of(*spatial as f64));
            Pass {
                h: h.channel_mix(w),
                logdet: logdet.add_scalar(jac),
            }
        }
        Layer::Coupling { name, channels, cond, kernel } => {
            let cb = channels - cond;
            let xa = h.narrow(1, 0, *cond);
            let xb = h.narrow(1, *cond, cb);
            let (log_scale, shift) = coupling_terms(p, name, xa, cb, *kernel);
            let yb = xb * log_scale.exp() + shift;
            Pass {
                h: xa.concat(yb, 1),
                logdet: logdet + log_scale.sum_per_sample(),
            }
        }
        Layer::Split { keep, .. } => {
            let c = h.shape()[1];
            latents.push(h.narrow(1, *keep, c - keep));
            Pass {
                h: h.narrow(1, 0, *keep),
                logdet,
            }
        }
    }
}

/// Applies the inverse of `layer` (latent-to-data direction); `logdet`
/// accumulates the log-determinant of the inverse map.
pub(crate) fn inverse_layer<'t, T: Real>(
    layer: &Layer,
    p: &Bound<'t, T>,
    buffers: &ParamStore<T>,
    state: Pass<'t, T>,
    latents: &[Var<'t, T>],
) -> Pass<'t, T> {
    let Pass { h, logdet } = state;
    match layer {
        Layer::Logit { eps } => {
            let eps = T::of(*eps);
            let range = T::one() - eps - eps;
            let d = h.value().len() / h.shape()[0];
            let s = h.sigmoid();
            let x = s.offset(-eps).scale(range.recip());
            // d/dy sigmoid(y) = s (1 - s)
            let jac = (s.ln() + s.neg().offset(T::one()).ln())
                .sum_per_sample()
                .offset(-T::of(d as f64) * range.ln());
            Pass { h: x, logdet: logdet + jac }
        }
        Layer::Squeeze => Pass {
            h: h.depth_to_space(),
            logdet,
        },
        Layer::ActNorm { name, spatial, .. } => {
            let bias = p.get(&format!("{name}.bias"));
            let logs = p.get(&format!("{name}.logs"));
            let x = h.mul_along(logs.neg().exp(), 1).sub_along(bias);
            let jac = logs.sum().scale(-T::of(*spatial as f64));
            Pass {
                h: x,
                logdet: logdet.add_scalar(jac),
            }
        }
        Layer::InvConv { name, spatial, .. } => {
            let (perm, sign) = invconv_buffers(buffers, name);
            let (lower, upper, log_s) = {
                let l = p.get(&format!("{name}.lower"));
                let u = p.get(&format!("{name}.upper"));
                let s = p.get(&format!("{name}.log_s"));
                (l.to_array(), u.to_array(), s)
            };
            let (l, b) = lu_factors(&lower, &upper, &log_s.value(), &sign);
            let m = inv_upper(&b).dot(&inv_unit_lower(&l));
            let c = perm.len();
            let mut w_inv = Array2::<T>::zeros((c, c));
            for (i, &pi) in perm.iter().enumerate() {
                w_inv.column_mut(i).assign(&m.column(pi));
            }
            let w_inv = h.tape().constant(w_inv.into_dyn());
            let jac = log_s.sum().scale(-T::of(*spatial as f64));
            Pass {
                h: h.channel_mix(w_inv),
                logdet: logdet.add_scalar(jac),
            }
        }
        Layer::Coupling { name, channels, cond, kernel } => {
            let cb = channels - cond;
            let ya = h.narrow(1, 0, *cond);
            let yb = h.narrow(1, *cond, cb);
            let (log_scale, shift) = coupling_terms(p, name, ya, cb, *kernel);
            let xb = (yb - shift) * log_scale.neg().exp();
            Pass {
                h: ya.concat(xb, 1),
                logdet: logdet - log_scale.sum_per_sample(),
            }
        }
        Layer::Split { level, .. } => Pass {
            h: h.concat(latents[*level], 1),
            logdet,
        },
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Subtracts the 1-D `b` along the channel axis.
    fn sub_along(self, b: Var<'t, T>) -> Var<'t, T> {
        self.add_along(b.neg(), 1)
    }
}
