use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a parameter in a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors with their Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
    pub(crate) step: u64,
    lookup: HashMap<String, usize>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            lookup: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(NnError::Config(format!("duplicate parameter {name}")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.m.push(Tensor::zeros(&value.shape));
        self.v.push(Tensor::zeros(&value.shape));
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    /// Number of optimizer steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
            step: self.step,
            lookup: self.lookup.clone(),
        }
    }
}
