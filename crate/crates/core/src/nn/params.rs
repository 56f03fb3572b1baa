use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// Gradients keyed by parameter name, as produced by [`crate::nn::Tape::backward`].
pub type Gradients = BTreeMap<String, Tensor2>;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Named trainable tensors with matching gradient buffers.
///
/// Iteration order is the lexicographic name order, which fixes the layout of
/// checkpoints and the order of optimizer updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    grads_ready: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name:?}")));
        }
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named {name:?}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor2> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named {name:?}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// True once [`ParamSet::set_grads`] has run since construction.
    pub fn has_grads(&self) -> bool {
        self.grads_ready
    }

    /// Overwrites every gradient buffer. Parameters absent from `grads` did not
    /// take part in the loss and get zero gradient.
    pub fn set_grads(&mut self, mut grads: Gradients) -> Result<()> {
        for (name, p) in &mut self.params {
            match grads.remove(name) {
                Some(g) => {
                    if g.shape() != p.value.shape() {
                        return Err(Error::Shape(format!(
                            "gradient for {name:?} is {:?}, parameter is {:?}",
                            g.shape(),
                            p.value.shape()
                        )));
                    }
                    p.grad = g;
                }
                None => p.grad.data_mut().fill(0.0),
            }
        }
        if let Some(name) = grads.keys().next() {
            return Err(Error::InvalidInput(format!("gradient for unknown parameter {name:?}")));
        }
        self.grads_ready = true;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }
}
