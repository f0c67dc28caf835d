use std::collections::BTreeMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Named trainable matrices, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Records only the parameters whose names start with `prefix`.
    pub fn bind_prefix(&self, tape: &mut Tape, prefix: &str) -> Bound {
        let vars = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics on an unknown name; parameter names are fixed by the model layout.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Pulls the gradient of every bound parameter out of `grads`.
    pub fn collect(&self, mut grads: Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.take(v)))
            .collect()
    }
}

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, data)
}
