use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::Container;
use crate::classifier::{ClassifierConfig, ClassifierModel};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::params::ParamStore;
use crate::real::Real;

pub const FLOW_KIND: &str = "flow";
pub const CLASSIFIER_KIND: &str = "classifier";

pub(crate) fn push_store<T: Real>(c: &mut Container, prefix: &str, store: &ParamStore<T>) {
    for (name, t) in store.iter() {
        c.push_real(format!("{prefix}/{name}"), t);
    }
}

pub(crate) fn read_store<T: Real>(c: &Container, prefix: &str) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    let names: Vec<String> = c
        .names()
        .filter_map(|n| n.strip_prefix(&format!("{prefix}/")).map(str::to_owned))
        .collect();
    for name in names {
        let t = c.real::<T>(&format!("{prefix}/{name}"))?;
        store.insert(name, t);
    }
    Ok(store)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowMeta {
    flow: FlowConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierMeta {
    classifier: ClassifierConfig,
}

pub fn flow_container<T: Real>(flow: &FlowModel<T>, seed: u64) -> Result<Container> {
    if !flow.is_initialized() {
        return Err(Error::Uninitialized);
    }
    let meta = serde_json::to_value(FlowMeta {
        flow: flow.config().clone(),
    })?;
    let mut c = Container::new(FLOW_KIND, Some(seed), meta);
    push_store(&mut c, "param", flow.params());
    push_store(&mut c, "buffer", flow.buffers());
    Ok(c)
}

pub fn flow_from_container<T: Real>(c: &Container) -> Result<FlowModel<T>> {
    check_kind(c, FLOW_KIND)?;
    let meta: FlowMeta = serde_json::from_value(c.config.clone())?;
    FlowModel::from_parts(meta.flow, read_store(c, "param")?, read_store(c, "buffer")?)
}

pub fn classifier_container<T: Real>(model: &ClassifierModel<T>, seed: u64) -> Result<Container> {
    let meta = serde_json::to_value(ClassifierMeta {
        classifier: model.config().clone(),
    })?;
    let mut c = Container::new(CLASSIFIER_KIND, Some(seed), meta);
    push_store(&mut c, "param", model.params());
    Ok(c)
}

pub fn classifier_from_container<T: Real>(c: &Container) -> Result<ClassifierModel<T>> {
    check_kind(c, CLASSIFIER_KIND)?;
    let meta: ClassifierMeta = serde_json::from_value(c.config.clone())?;
    ClassifierModel::from_parts(meta.classifier, read_store(c, "param")?)
}

fn check_kind(c: &Container, expected: &str) -> Result<()> {
    if c.kind != expected {
        return Err(Error::CheckpointKind {
            found: c.kind.clone(),
            expected: expected.into(),
        });
    }
    Ok(())
}

pub fn save_flow<T: Real>(flow: &FlowModel<T>, seed: u64, path: &Path) -> Result<()> {
    flow_container(flow, seed)?.save(path)
}

pub fn load_flow<T: Real>(path: &Path) -> Result<FlowModel<T>> {
    flow_from_container(&Container::load(path)?)
}

pub fn save_classifier<T: Real>(model: &ClassifierModel<T>, seed: u64, path: &Path) -> Result<()> {
    classifier_container(model, seed)?.save(path)
}

pub fn load_classifier<T: Real>(path: &Path) -> Result<ClassifierModel<T>> {
    classifier_from_container(&Container::load(path)?)
}
