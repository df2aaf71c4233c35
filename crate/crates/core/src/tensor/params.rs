use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Result, Tensor, TensorError};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    grad: Vec<f64>,
    trainable: bool,
}

/// Named parameter tensors together with their gradient accumulators.
///
/// Values are reference counted so a tape can hold them without copying;
/// mutation goes through [`Arc::make_mut`] and only clones while a tape
/// is still alive.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names are unique paths like
    /// `decoder.arc.weight`.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        let numel = value.numel();
        self.entries.push(Entry {
            name: name.clone(),
            value: Arc::new(value),
            grad: vec![0.0; numel],
            trainable: true,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = self.value_mut(id);
        if t.numel() != values.len() {
            return Err(TensorError::Shape {
                op: "ParamStore::set_values",
                detail: format!("expected {} values, got {}", t.numel(), values.len()),
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Mutable views over the gradients of every trainable parameter.
    pub fn trainable_grads_mut(&mut self) -> Vec<&mut [f64]> {
        self.entries
            .iter_mut()
            .filter(|e| e.trainable)
            .map(|e| e.grad.as_mut_slice())
            .collect()
    }

    /// Clips the global L2 norm of trainable gradients and returns the
    /// norm measured before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let mut grads = self.trainable_grads_mut();
        super::clip_global_norm(&mut grads, max_norm)
    }

    /// Cheap copy of all current values (shares buffers until mutated).
    pub fn snapshot(&self) -> Vec<Arc<Tensor>> {
        self.entries.iter().map(|e| Arc::clone(&e.value)).collect()
    }

    pub fn restore(&mut self, snapshot: &[Arc<Tensor>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            e.value = Arc::clone(v);
        }
    }
}

/// Weight initializers.
pub struct Init;

impl Init {
    /// Glorot/Xavier uniform for a `fan_in × fan_out` matrix.
    pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(rng, &[fan_in, fan_out], bound)
    }

    pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("numel matches shape")
    }

    pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite positive std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("numel matches shape")
    }
}
