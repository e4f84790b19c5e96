//! Adversarial robustness toolkit: normalizing-flow generators, small
//! classifiers, latent/input joint attacks, mixup-based adversarial training
//! and robustness evaluation.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod classifier;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod linalg;
pub mod mixup;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod training;

pub use classifier::{Architecture, ClassifierConfig, ClassifierModel, TargetSpec};
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel, LatentCode};
pub use real::Real;
