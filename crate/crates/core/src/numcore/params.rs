use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, which is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let id = self.values.len();
        let prev = self.lookup.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name '{name}'");
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "'{}' has shape {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.ids()
            .zip(&self.names)
            .zip(&self.values)
            .map(|((id, n), v)| (id, n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| Some(tape.leaf(v.clone()))).collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| Some(tape.constant(v.clone()))).collect(),
        }
    }

    /// Records only `ids`, as constants; other parameters are unavailable.
    pub fn bind_subset<'t>(&self, tape: &'t Tape, ids: &[ParamId]) -> Bound<'t> {
        let mut vars = vec![None; self.values.len()];
        for id in ids {
            vars[id.0] = Some(tape.constant(self.values[id.0].clone()));
        }
        Bound { vars }
    }
}

/// Parameters of a [`ParamStore`] as they appear on one tape.
#[derive(Clone, Debug)]
pub struct Bound<'t> {
    vars: Vec<Option<Var<'t>>>,
}

impl<'t> Bound<'t> {
    /// Wraps already-recorded variables, in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Bound {
            vars: vars.into_iter().map(Some).collect(),
        }
    }

    /// Panics if `id` was left out of a [`ParamStore::bind_subset`].
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0].expect("parameter not bound on this tape")
    }

    /// Gradient per bound parameter, zeros where a parameter did not reach the loss.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().flatten().map(|&v| grads.wrt(v)).collect()
    }
}
