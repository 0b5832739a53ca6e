//! Named registry of learnable tensors.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, name-unique parameter storage. Insertion order is the
/// checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Replaces values from `(name, tensor)` pairs. Names must match exactly
    /// and shapes must agree.
    pub fn assign_all(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let given: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        let missing: Vec<&str> = self
            .names
            .iter()
            .map(String::as_str)
            .filter(|n| !given.contains(n))
            .collect();
        let unknown: Vec<&str> = given
            .iter()
            .copied()
            .filter(|n| !self.index.contains_key(*n))
            .collect();
        if !missing.is_empty() || !unknown.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter names differ; missing: [{}]; unknown: [{}]",
                missing.join(", "),
                unknown.join(", ")
            )));
        }
        for (name, value) in entries {
            let i = self.index[&name];
            if self.values[i].dims() != value.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected dims {:?}, found {:?}",
                    self.values[i].dims(),
                    value.dims()
                )));
            }
            self.values[i] = value;
        }
        Ok(())
    }
}

/// Tape handles for all parameters of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient per parameter, `None` where the loss never reached it.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}
