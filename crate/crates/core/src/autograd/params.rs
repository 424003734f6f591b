use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable leaf with a same-shaped gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    pub grad: Tensor,
    pub requires_grad: bool,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    /// Mutable access; copies only if a live tape still holds the value.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() || value.is_complex() != self.value.is_complex() {
            return Err(crate::error::shape_mismatch(
                "set_value",
                self.value.shape(),
                value.shape(),
            ));
        }
        self.value = Arc::new(value);
        Ok(())
    }
}

/// Ordered collection of parameters; ids are indices into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = value.zeros_like();
        self.params.push(Parameter {
            name: name.into(),
            value: Arc::new(value),
            grad,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.params[id.0].value()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            for c in p.grad.components_mut() {
                c.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Adds gradients from a backward pass into the accumulators.
    pub fn accumulate(&mut self, grads: &super::Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = self
                .params
                .get_mut(id.0)
                .ok_or_else(|| Error::Autograd(format!("unknown parameter id {}", id.0)))?;
            p.grad.add_assign(g)?;
        }
        Ok(())
    }
}
