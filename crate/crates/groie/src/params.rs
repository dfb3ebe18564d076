//! Named trainable parameters with gradient accumulators.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// An ordered set of parameters addressable by name.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter::new(name, value));
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        Ok(self.get(self.index_of(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        let idx = self.index_of(name)?;
        Ok(self.get_mut(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Accumulate into a parameter's gradient slot.
    pub fn accumulate(&mut self, idx: usize, grad: &[f64]) {
        let p = &mut self.params[idx];
        for (dst, src) in p.grad.data_mut().iter_mut().zip(grad) {
            *dst += src;
        }
    }

    /// Merge another set under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) -> Result<()> {
        for p in other.params {
            self.add(format!("{prefix}{}", p.name), p.value)?;
        }
        Ok(())
    }
}
