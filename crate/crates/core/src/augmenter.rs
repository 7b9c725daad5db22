//! Learnable model-level augmenters: two 3-layer MLPs `d → d → d → d`
//! mapping data-augmented representations to model-augmented views.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::objectives::ViewQuadruple;
use crate::params::{uniform, Bound, ParamSet};
use crate::rng;

pub const LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmenterConfig {
    pub dim: usize,
    /// Both views go through the first augmenter's parameters.
    pub shared: bool,
    /// Half-width of the uniform perturbation added to identity weights.
    pub init_scale: f64,
}

impl AugmenterConfig {
    pub fn new(dim: usize, shared: bool) -> Self {
        Self {
            dim,
            shared,
            init_scale: 0.1 / (dim as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Augmenters {
    pub cfg: AugmenterConfig,
}

fn name(which: usize, layer: usize, part: &str) -> String {
    format!("phi{which}.layer{layer}.{part}")
}

impl Augmenters {
    pub fn new(cfg: AugmenterConfig) -> Self {
        Self { cfg }
    }

    /// Near-identity initialization: `W = I + U(−s, s)`, zero bias. Each
    /// augmenter draws from its own stream; in shared mode only `phi1`
    /// exists.
    pub fn init(&self, seed: u64) -> ParamSet {
        let d = self.cfg.dim;
        let mut p = ParamSet::new();
        let count = if self.cfg.shared { 1 } else { 2 };
        for which in 1..=count {
            let mut r = rng::stream(seed, &[rng::tag::INIT, 100 + which as u64]);
            for layer in 0..LAYERS {
                let w = Tensor::eye(d) + uniform(&mut r, d, d, self.cfg.init_scale);
                p.insert(name(which, layer, "weight"), w);
                p.insert(name(which, layer, "bias"), Tensor::zeros((1, d)));
            }
        }
        p
    }

    fn mlp(&self, g: &mut Graph<'_>, p: &Bound, which: usize, x: Var) -> Var {
        let which = if self.cfg.shared { 1 } else { which };
        let mut h = x;
        for layer in 0..LAYERS {
            h = g.matmul(h, p.var(&name(which, layer, "weight")));
            h = g.add_row(h, p.var(&name(which, layer, "bias")));
            if layer + 1 < LAYERS {
                h = g.elu(h);
            }
        }
        h
    }

    /// `(z1, z2) = (w_φ1(h1), w_φ2(h2))` on the graph.
    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, h1: Var, h2: Var) -> (Var, Var) {
        for h in [h1, h2] {
            assert_eq!(
                g.value(h).ncols(),
                self.cfg.dim,
                "augmenter expects {}-dimensional inputs",
                self.cfg.dim
            );
        }
        let z1 = self.mlp(g, p, 1, h1);
        let z2 = self.mlp(g, p, 2, h2);
        (z1, z2)
    }

    pub fn augment_views(&self, h1: &Tensor, h2: &Tensor, params: &ParamSet) -> ViewQuadruple {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let (a, b) = (g.constant(h1.clone()), g.constant(h2.clone()));
        let (z1, z2) = self.forward(&mut g, &p, a, b);
        ViewQuadruple {
            h1: h1.clone(),
            h2: h2.clone(),
            z1: g.value(z1).clone(),
            z2: g.value(z2).clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set_all(p: &mut ParamSet, f: impl Fn(&str, &mut Tensor)) {
        for (n, t) in p.iter_mut() {
            f(n, t);
        }
    }

    #[test]
    fn zero_weights_give_zero_views() {
        let aug = Augmenters::new(AugmenterConfig::new(3, false));
        let mut p = aug.init(1);
        set_all(&mut p, |_, t| t.fill(0.0));
        let h = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        let v = aug.augment_views(&h, &(-&h), &p);
        assert!(v.z1.iter().chain(v.z2.iter()).all(|&x| x == 0.0));
        assert_eq!(v.h1, h);
    }

    #[test]
    fn identity_layers_pass_positive_inputs_through() {
        let aug = Augmenters::new(AugmenterConfig::new(3, false));
        let mut p = aug.init(2);
        set_all(&mut p, |n, t| {
            if n.ends_with("weight") {
                *t = Tensor::eye(3);
            } else {
                t.fill(0.0);
            }
        });
        let h = array![[0.3, 1.0, 2.5]];
        let v = aug.augment_views(&h, &h, &p);
        assert_eq!(v.z1, h);
        assert_eq!(v.z2, h);
    }

    #[test]
    fn two_dim_forward_by_hand() {
        let aug = Augmenters::new(AugmenterConfig::new(2, false));
        let mut p = aug.init(3);
        let w = [array![[1.0, 0.5], [-1.0, 2.0]], array![[0.5, 0.0], [1.0, 1.0]], array![[2.0, -1.0], [0.0, 1.0]]];
        let b = [array![[0.1, -0.2]], array![[0.0, 0.3]], array![[-0.5, 0.0]]];
        for l in 0..3 {
            *p.get_mut(&name(1, l, "weight")).unwrap() = w[l].clone();
            *p.get_mut(&name(1, l, "bias")).unwrap() = b[l].clone();
        }
        // h = [1, 2]
        // a0 = [1 − 2 + 0.1, 0.5 + 4 − 0.2] = [−0.9, 4.3]; elu → [e^−0.9 − 1, 4.3]
        // a1 = [0.5·e0 + 4.3, 4.3 + 0.3]; elu identity (both positive)
        // z = [2·a1₀ − 0.5, −a1₀ + a1₁]
        let e0 = (-0.9f64).exp_m1();
        let a1 = [0.5 * e0 + 4.3, 4.6];
        let expected = [2.0 * a1[0] - 0.5, -a1[0] + a1[1]];
        let v = aug.augment_views(&array![[1.0, 2.0]], &array![[0.0, 0.0]], &p);
        assert!((v.z1[[0, 0]] - expected[0]).abs() < 1e-12);
        assert!((v.z1[[0, 1]] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn sharing_and_independence() {
        let shared = Augmenters::new(AugmenterConfig::new(4, true));
        let p = shared.init(5);
        assert!(p.names().all(|n| n.starts_with("phi1.")));
        let h = Tensor::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let v = shared.augment_views(&h, &h, &p);
        assert_eq!(v.z1, v.z2);

        let separate = Augmenters::new(AugmenterConfig::new(4, false));
        let p = separate.init(5);
        assert_ne!(p.get("phi1.layer0.weight"), p.get("phi2.layer0.weight"));
        assert_eq!(p, separate.init(5));
        let v = separate.augment_views(&h, &h, &p);
        assert_ne!(v.z1, v.z2);
        assert_eq!(v.z1.dim(), (3, 4));
    }

    #[test]
    #[should_panic(expected = "4-dimensional")]
    fn dimension_mismatch_is_fatal() {
        let aug = Augmenters::new(AugmenterConfig::new(4, false));
        let p = aug.init(1);
        aug.augment_views(&Tensor::zeros((2, 3)), &Tensor::zeros((2, 3)), &p);
    }
}
