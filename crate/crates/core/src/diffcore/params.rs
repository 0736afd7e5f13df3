//! Named learnable parameters with paired gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Flat registry of parameters; registration order is the canonical order
/// used by the optimizer, the checkpoint format and the gradient report.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::validation(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(Entry { name: name.to_string(), value, grad });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, pid: ParamId) -> &str {
        &self.entries[pid.0].name
    }

    pub fn value(&self, pid: ParamId) -> &Tensor {
        &self.entries[pid.0].value
    }

    pub fn value_mut(&mut self, pid: ParamId) -> &mut Tensor {
        &mut self.entries[pid.0].value
    }

    pub fn grad(&self, pid: ParamId) -> &Tensor {
        &self.entries[pid.0].grad
    }

    pub fn grad_mut(&mut self, pid: ParamId) -> &mut Tensor {
        &mut self.entries[pid.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for v in e.grad.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Global L2 norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Total number of scalar parameter entries.
    pub fn entry_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Variance-preserving scaled-uniform init for a weight of the given shape:
/// U(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
pub fn init_weight(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [rows, cols] => (*rows, *cols),
        // Conv kernels [k, c_in, c_out]: receptive field folds into fan-in.
        [k, c_in, c_out] => (k * c_in, *c_out),
        [n] => (*n, *n),
        _ => (1, 1),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub fn init_zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec())
}

pub fn init_ones(shape: &[usize]) -> Tensor {
    Tensor::filled(shape.to_vec(), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_must_be_unique() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(store.register("w", Tensor::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn grad_shape_tracks_value_shape() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::zeros(vec![3, 4])).unwrap();
        assert_eq!(store.grad(id).shape(), &[3, 4]);
    }

    #[test]
    fn init_weight_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = init_weight(&mut rng, &[8, 8]);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < limit));
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let w2 = init_weight(&mut rng2, &[8, 8]);
        assert_eq!(w, w2);
    }
}
