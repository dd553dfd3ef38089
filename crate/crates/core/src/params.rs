//! Named, ordered parameter tensors and their initialization.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable tensors in registration order. Every tensor tracks gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, valid for one graph.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(id)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-tracking leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    /// Adds the gradients of a reverse pass into each parameter's accumulator.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<(), TensorError> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(d) = grads.raw(v) {
                t.accumulate_grad(d)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            if let (Some(g), _) = t.grad_and_data_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.iter().map(|(n, t)| (n.to_string(), t.norm())).collect()
    }
}

/// Seeded parameter initializer: weights uniform in `[-r, r]` with
/// `r = sqrt(3/fan_in)` (unit variance per output at unit-variance input),
/// biases zero.
#[derive(Debug)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let r = (3.0 / fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-r..=r))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Init::new(3).uniform(&[4, 9], 9);
        let b = Init::new(3).uniform(&[4, 9], 9);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= (3.0f64 / 9.0).sqrt()));
        assert_ne!(a, Init::new(4).uniform(&[4, 9], 9));
        let big = Init::new(5).uniform(&[100, 100], 9);
        let var = big.data().iter().map(|v| v * v).sum::<f64>() / big.numel() as f64;
        assert!((var - 1.0 / 9.0).abs() < 0.005, "{var}");
    }

    #[test]
    fn bind_and_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let u = store.add("u", Tensor::new(vec![1], vec![7.0]).unwrap());
        for _ in 0..2 {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let sq = g.mul(bound[w], bound[w]).unwrap();
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            store.accumulate(&bound, &grads).unwrap();
        }
        assert_eq!(store.get(w).grad().unwrap(), &[4.0, 8.0]);
        assert_eq!(store.get(u).grad().unwrap(), &[0.0]);
        assert_eq!(store.id("u"), Some(u));
        store.zero_grads();
        assert_eq!(store.grad_norm(), 0.0);
    }
}
