//! Named parameter tensors shared by models, optimizers and checkpoints.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::autodiff::{Gradients, Tape, Var};
use crate::real::Real;

/// Ordered map of parameter name to tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.tensors.get_mut(name)
    }

    /// Panics when `name` is absent; model code only asks for names it
    /// registered itself.
    pub fn tensor(&self, name: &str) -> &ArrayD<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Records every tensor on `tape`, as tracked variables when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.var(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn zeros_like(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.as_f64()))))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct Bound<'t, T: Real> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Var<'t, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Collects gradients for every bound parameter.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), grads.wrt(*v));
        }
        out
    }
}
