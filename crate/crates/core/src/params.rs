//! Named parameter tensors and their binding into a graph.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }
}

/// Registers parameters as trainable graph leaves on first use.
pub struct Binder<'a> {
    params: &'a Params,
    ids: BTreeMap<String, NodeId>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a Params) -> Self {
        Binder {
            params,
            ids: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(id) = self.ids.get(name) {
            return Ok(*id);
        }
        let id = g.param(name, self.params.get(name)?.clone())?;
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bound(&self) -> impl Iterator<Item = &String> {
        self.ids.keys()
    }
}

/// Xavier-uniform matrix, `U(±√(6/(fan_in+fan_out)))`.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}
