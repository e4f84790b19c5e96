//! Synthetic datasets: images generated from known latent codes by a seeded
//! flow, so every image has an exact preimage, plus 2-D two-moons.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::TensorDataset;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorKind {
    /// Invertible affine map followed by a sigmoid: a one-step flow whose
    /// coupling layers are the identity.
    Affine {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Multi-scale flow with every parameter drawn at random.
    Flow {
        levels: usize,
        steps_per_level: usize,
        hidden_width: usize,
        #[serde(default = "default_scale")]
        scale: f64,
    },
}

fn default_scale() -> f64 {
    0.3
}

/// How a label is read off the (flattened) latent code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelRule {
    /// Two classes: `z[coordinate] > 0`.
    Sign { coordinate: usize },
    /// One class per listed coordinate: the arg-max among them.
    Argmax { coordinates: Vec<usize> },
}

impl LabelRule {
    fn coordinates(&self) -> Vec<usize> {
        match self {
            LabelRule::Sign { coordinate } => vec![*coordinate],
            LabelRule::Argmax { coordinates } => coordinates.clone(),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            LabelRule::Sign { .. } => 2,
            LabelRule::Argmax { coordinates } => coordinates.len(),
        }
    }

    /// Label and decision margin (distance of the deciding value to the
    /// runner-up, or to zero for the sign rule).
    pub fn apply(&self, z: &[f64]) -> (usize, f64) {
        match self {
            LabelRule::Sign { coordinate } => {
                let v = z[*coordinate];
                (usize::from(v > 0.0), v.abs())
            }
            LabelRule::Argmax { coordinates } => {
                let mut best = 0;
                for (k, &c) in coordinates.iter().enumerate() {
                    if z[c] > z[coordinates[best]] {
                        best = k;
                    }
                }
                let top = z[coordinates[best]];
                let runner_up = coordinates
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != best)
                    .map(|(_, &c)| z[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                (best, top - runner_up)
            }
        }
    }
}

/// Adds `magnitude * pattern[y]` to the latent coordinates outside the label
/// rule, where `pattern[y]` is a seeded random sign vector per class. This
/// plants many individually weak but jointly predictive features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassShift {
    pub magnitude: f64,
    /// Number of coordinates receiving the shift; all free ones when absent.
    #[serde(default)]
    pub coordinates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticManifoldSpec {
    pub generator: GeneratorKind,
    /// Image shape `[c, h, w]`; the latent dimension is `c * h * w`.
    pub image_shape: [usize; 3],
    pub n_samples: usize,
    pub label_rule: LabelRule,
    /// Latent draws whose label margin is below this are rejected.
    #[serde(default)]
    pub margin: f64,
    #[serde(default)]
    pub class_shift: Option<ClassShift>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    1.0
}

impl SyntheticManifoldSpec {
    /// Two-class sign rule on coordinate 0 with the affine generator.
    pub fn affine(image_shape: [usize; 3], n_samples: usize, seed: u64) -> Self {
        Self {
            generator: GeneratorKind::Affine { scale: default_scale() },
            image_shape,
            n_samples,
            label_rule: LabelRule::Sign { coordinate: 0 },
            margin: 0.0,
            class_shift: None,
            temperature: 1.0,
            seed,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.label_rule.num_classes()
    }

    fn validate(&self) -> Result<()> {
        let d = self.latent_dim();
        if d == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Empty("synthetic dataset".into()));
        }
        let coords = self.label_rule.coordinates();
        if coords.is_empty() || coords.iter().any(|&c| c >= d) {
            return Err(Error::Config(format!("label coordinates {coords:?} outside latent dim {d}")));
        }
        if self.num_classes() < 2 {
            return Err(Error::Config("label rule must produce at least 2 classes".into()));
        }
        if !(self.margin >= 0.0 && self.margin < 1.5 * self.temperature) {
            return Err(Error::Config(format!(
                "margin {} must lie in [0, 1.5 * temperature)",
                self.margin
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// The generator `G` of this spec.
    pub fn generator(&self) -> Result<FlowModel<f64>> {
        let mut rng = rng_for(self.seed, "synth-generator", 0);
        match &self.generator {
            GeneratorKind::Affine { scale } => {
                let cfg = FlowConfig::new(self.image_shape)
                    .with_levels(1)
                    .with_steps(1)
                    .with_hidden_width(1)
                    .with_logit(0.0);
                let mut flow = FlowModel::random(cfg, *scale, &mut rng)?;
                let coupling: Vec<String> = flow
                    .params()
                    .names()
                    .filter(|n| n.contains(".coupling.conv3."))
                    .cloned()
                    .collect();
                for name in coupling {
                    if let Some(t) = flow.params_mut().get_mut(&name) {
                        t.fill(0.0);
                    }
                }
                Ok(flow)
            }
            GeneratorKind::Flow {
                levels,
                steps_per_level,
                hidden_width,
                scale,
            } => {
                let cfg = FlowConfig::new(self.image_shape)
                    .with_levels(*levels)
                    .with_steps(*steps_per_level)
                    .with_hidden_width(*hidden_width)
                    .with_logit(0.0);
                FlowModel::random(cfg, *scale, &mut rng)
            }
        }
    }
}

/// A synthetic dataset together with the generator that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: TensorDataset<f64>,
    pub generator: FlowModel<f64>,
}

/// Draws latent codes, labels them by the rule and decodes them with the
/// generator. The stored latents reproduce the stored images exactly.
pub fn synth_manifold_dataset(spec: &SyntheticManifoldSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let generator = spec.generator()?;
    let d = spec.latent_dim();
    let k = spec.num_classes();
    let rule_coords = spec.label_rule.coordinates();
    let mut rng = rng_for(spec.seed, "synth-latents", 0);

    let mut free: Vec<usize> = (0..d).filter(|c| !rule_coords.contains(c)).collect();
    let shift = match &spec.class_shift {
        Some(s) if s.magnitude != 0.0 => {
            let mut pattern_rng = rng_for(spec.seed, "synth-shift", 0);
            free.shuffle(&mut pattern_rng);
            let count = s.coordinates.unwrap_or(free.len()).min(free.len());
            let coords = free[..count].to_vec();
            let patterns: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    (0..count)
                        .map(|_| if pattern_rng.random::<bool>() { s.magnitude } else { -s.magnitude })
                        .collect()
                })
                .collect();
            Some((coords, patterns))
        }
        _ => None,
    };

    let mut latents = Array2::zeros((spec.n_samples, d));
    let mut labels = Vec::with_capacity(spec.n_samples);
    for mut row in latents.outer_iter_mut() {
        let (z, y) = loop {
            let z: Vec<f64> = (0..d)
                .map(|_| spec.temperature * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let (y, m) = spec.label_rule.apply(&z);
            if m >= spec.margin {
                break (z, y);
            }
        };
        row.assign(&ndarray::ArrayView1::from(&z));
        if let Some((coords, patterns)) = &shift {
            for (j, &c) in coords.iter().enumerate() {
                row[c] += patterns[y][j];
            }
        }
        labels.push(y);
    }
    let images = generator.decode_flat(&latents)?;
    let images = images.mapv(|v| v.clamp(0.0, 1.0));
    let dataset = TensorDataset::new(images, labels, k, Some(latents))?;
    Ok(SyntheticData { dataset, generator })
}

/// Two interleaved half circles, rescaled into the unit square, as
/// `[n, 2, 1, 1]` images with the moon index as label.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<TensorDataset<f64>> {
    if n < 2 {
        return Err(Error::Empty("two-moons dataset".into()));
    }
    let mut rng = rng_for(seed, "two-moons", 0);
    let mut images = ArrayD::zeros(IxDyn(&[n, 2, 1, 1]));
    let mut labels = Vec::with_capacity(n);
    for (i, mut px) in images.axis_iter_mut(Axis(0)).enumerate() {
        let y = i % 2;
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (mut a, mut b) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        a += noise * rng.sample::<f64, _>(StandardNormal);
        b += noise * rng.sample::<f64, _>(StandardNormal);
        px[[0, 0, 0]] = ((a + 1.5) / 4.0).clamp(0.0, 1.0);
        px[[1, 0, 0]] = ((b + 1.0) / 2.5).clamp(0.0, 1.0);
        labels.push(y);
    }
    TensorDataset::new(images, labels, 2, None)
}
