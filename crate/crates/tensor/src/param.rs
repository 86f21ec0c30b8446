//! Named parameter storage.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub frozen: bool,
}

/// Parameters keyed by dotted name (`enc_lge.l0.conv1.w`). Names starting
/// with the same group prefix can be frozen together.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            self.params[id.0].value = Arc::new(value);
            return id;
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), value: Arc::new(value), frozen: false });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.id(name)
            .map(|id| self.params[id.0].value.as_ref())
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Mutable access for optimisers; clones the tensor if a live graph
    /// still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Entries in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.index.iter().map(|(k, id)| (k.as_str(), self.params[id.0].value.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// He-normal initialisation for a weight with `fan_in` inputs.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape/product agree")
}
