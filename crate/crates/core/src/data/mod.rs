//! Datasets, synthetic generators and the on-disk container shared by
//! datasets and checkpoints.

mod checkpoint;
pub mod container;
mod dataset;
mod synth;

pub use checkpoint::{
    classifier_container, classifier_from_container, flow_container, flow_from_container, load_classifier,
    load_flow, save_classifier, save_flow, CLASSIFIER_KIND, FLOW_KIND,
};
pub(crate) use checkpoint::{push_store, read_store};
pub use container::{write_atomic, Container};
pub use dataset::TensorDataset;
pub use synth::{
    synth_manifold_dataset, two_moons, ClassShift, GeneratorKind, LabelRule, SyntheticData,
    SyntheticManifoldSpec,
};
