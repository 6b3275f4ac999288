//! Named trainable parameters.
//!
//! All parameter groups (fusion, encoder, classifier) live in one
//! [`ParamStore`] addressable by name; registration order is the canonical
//! order used by the optimizer and the tape binding.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn shapes(&self) -> Vec<[usize; 2]> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    /// Names and tensors in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace a tensor wholesale (used by checkpoint loading).
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        if !self.tensors[id.0].same_shape(&tensor) {
            return Err(Error::dims(
                format!("parameter {}", self.names[id.0]),
                &self.tensors[id.0].shape(),
                &tensor.shape(),
            ));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }
}

/// Parameters bound onto a tape for one forward pass.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Record every parameter as a grad-tracked leaf, in store order.
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        let vars = store
            .tensors()
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        BoundParams { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; zero tensors for parameters the loss never
    /// touched.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.tensors()[i].rows(), store.tensors()[i].cols()))
            })
            .collect()
    }
}
