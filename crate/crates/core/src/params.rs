//! Named parameter tensors and their binding onto a [`Graph`].

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};

use rand::Rng;

use crate::autograd::{Gradients, Graph, Tensor, Var};

/// An ordered collection of named trainable tensors (one optimizer group).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Panics if the tensor is missing; model code only asks for names it
    /// created.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Content hash over names, shapes and exact bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            h.write_usize(t.nrows());
            h.write_usize(t.ncols());
            for v in t.iter() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Places every tensor on the graph as a borrowed leaf.
    pub fn bind<'p>(&'p self, graph: &mut Graph<'p>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t, trainable)))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    /// Gradients for every bound tensor; tensors the loss does not reach get
    /// zeros.
    pub fn grads(&self, grads: &Gradients, params: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, var) in &self.vars {
            let g = match grads.wrt(*var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(params.expect(name).dim()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

/// Glorot-uniform bound for a `[fan_in × fan_out]` weight.
pub(crate) fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
