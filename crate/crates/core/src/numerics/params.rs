use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Result, UumError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Replace a tensor in place; the shape must match exactly.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let current = &self.tensors[id.0];
        if current.shape() != tensor.shape() {
            return Err(UumError::CheckpointShape {
                name: self.names[id.0].clone(),
                expected: current.shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }
}
