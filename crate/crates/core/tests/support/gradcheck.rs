//! Central-difference gradient checks for the training objectives on toy
//! shapes. Shared by the core gradient tests and the acceptance target.

use mclrec_core::augmenter::{AugmenterConfig, Augmenters};
use mclrec_core::autograd::{Graph, Tensor, Var};
use mclrec_core::corpus::{ItemId, SequenceBatch};
use mclrec_core::encoder::{Encoder, EncoderConfig, ModelConfig};
use mclrec_core::objectives::{contrastive_nodes, info_nce_node, rec_loss_node, reg_node};
use mclrec_core::params::{Bound, ParamSet};
use mclrec_core::rng::{self, StreamRng};
use rand::Rng;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Rec,
    Con,
    Cl2,
    Reg,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Rec, Objective::Con, Objective::Cl2, Objective::Reg];

    /// Only the regularizer has kinks (its hinges and min/max selections).
    pub fn is_smooth(self) -> bool {
        self != Objective::Reg
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Rec => "L_rec",
            Objective::Con => "L_con",
            Objective::Cl2 => "L_cl2",
            Objective::Reg => "R",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    /// Coordinates where the plain central difference missed and a
    /// Richardson estimate from steps ε and ε/2 was needed. These sit in
    /// regions of very high curvature, where the ε-step truncation error
    /// exceeds the tolerance.
    pub refined: usize,
    /// Coordinates of a piecewise objective where the one-sided
    /// differences disagree: only a subgradient exists there.
    pub kinks: usize,
    pub max_rel: f64,
    pub worst: String,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    // The floor keeps round-off in the difference quotient (about 1e-10 at
    // this ε) from dominating exactly-zero gradients.
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

impl Report {
    /// `f(h)` is the objective with the coordinate shifted by `h`.
    fn record(&mut self, what: String, analytic: f64, smooth: bool, f: impl Fn(f64) -> f64) {
        let (fp, fm) = (f(EPS), f(-EPS));
        let numeric = (fp - fm) / (2.0 * EPS);
        let mut rel = rel_err(analytic, numeric);
        if rel > TOLERANCE {
            let half = (f(EPS / 2.0) - f(-EPS / 2.0)) / EPS;
            let richardson = (4.0 * half - numeric) / 3.0;
            let refined = rel_err(analytic, richardson);
            if refined <= TOLERANCE {
                self.refined += 1;
                rel = refined;
            } else if !smooth {
                let f0 = f(0.0);
                let (right, left) = ((fp - f0) / EPS, (f0 - fm) / EPS);
                if (right - left).abs() > 1e-3 + 1e-2 * right.abs().max(left.abs()) {
                    self.kinks += 1;
                    return;
                }
            }
        }
        self.checked += 1;
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{what}: analytic {analytic:e} numeric {numeric:e}");
        }
    }

    pub fn merge(&mut self, other: Report) {
        self.checked += other.checked;
        self.refined += other.refined;
        self.kinks += other.kinks;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel <= TOLERANCE && self.checked > 0 && self.kinks * 20 <= self.checked
    }
}

/// Batch 3, d 4, n 5, |I| 7, one block, two heads.
pub struct Toy {
    pub encoder: Encoder,
    pub augmenters: Augmenters,
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub batch: SequenceBatch,
    pub view1: SequenceBatch,
    pub view2: SequenceBatch,
    seed: u64,
}

const NUM_ITEMS: usize = 7;
const N: usize = 5;
const D: usize = 4;

fn random_batch(r: &mut impl Rng) -> SequenceBatch {
    let rows: Vec<(Vec<ItemId>, ItemId)> = (0..3)
        .map(|_| {
            let len = r.gen_range(1..=N + 1);
            let items = (0..len).map(|_| r.gen_range(1..=NUM_ITEMS as ItemId)).collect();
            (items, r.gen_range(1..=NUM_ITEMS as ItemId))
        })
        .collect();
    SequenceBatch::from_rows(rows.iter().enumerate().map(|(u, (s, t))| (s.as_slice(), *t, u)), N)
}

impl Toy {
    pub fn new(seed: u64) -> Self {
        let model = ModelConfig {
            hidden: D,
            max_len: N,
            blocks: 1,
            heads: 2,
            dropout: 0.1,
        };
        let encoder = Encoder::new(EncoderConfig::new(NUM_ITEMS, &model));
        let augmenters = Augmenters::new(AugmenterConfig::new(D, false));
        let mut r = rng::stream(seed, &[77]);
        // Bump the augmenters away from identity so their gradients are
        // not trivially structured.
        let mut phi = augmenters.init(seed);
        for (_, t) in phi.iter_mut() {
            t.mapv_inplace(|x| x + r.gen_range(-0.3..0.3));
        }
        Toy {
            theta: encoder.init(seed),
            phi,
            encoder,
            augmenters,
            batch: random_batch(&mut r),
            view1: random_batch(&mut r),
            view2: random_batch(&mut r),
            seed,
        }
    }

    fn drop(&self, which: u64) -> Option<StreamRng> {
        Some(rng::stream(self.seed, &[which]))
    }

    /// The objective as a graph over `theta` and `phi`, both trainable.
    fn build<'p>(&self, g: &mut Graph<'p>, theta: &'p ParamSet, phi: &'p ParamSet, obj: Objective) -> (Var, Bound, Bound) {
        let pt = theta.bind(g, true);
        let pp = phi.bind(g, true);
        let enc = &self.encoder;
        if obj == Objective::Rec {
            let out = enc.forward(g, &pt, &self.batch, self.drop(1));
            let logits = enc.score(g, &pt, out.last);
            return (rec_loss_node(g, logits, &self.batch.targets), pt, pp);
        }
        let h1 = enc.forward(g, &pt, &self.view1, self.drop(2)).last;
        let h2 = enc.forward(g, &pt, &self.view2, self.drop(3)).last;
        let (z1, z2) = self.augmenters.forward(g, &pp, h1, h2);
        let c = contrastive_nodes(g, h1, h2, z1, z2, 1.0);
        let root = match obj {
            Objective::Rec => unreachable!(),
            Objective::Con => c.cl1,
            Objective::Cl2 => c.cl2,
            Objective::Reg => c.reg,
        };
        (root, pt, pp)
    }

    pub fn value(&self, theta: &ParamSet, phi: &ParamSet, obj: Objective) -> f64 {
        let mut g = Graph::new();
        let (root, _, _) = self.build(&mut g, theta, phi, obj);
        g.scalar(root)
    }

    /// Checks the gradient of `obj` with respect to every scalar of θ and φ.
    pub fn check_params(&self, obj: Objective) -> Report {
        let (g_theta, g_phi) = {
            let mut g = Graph::new();
            let (root, bt, bp) = self.build(&mut g, &self.theta, &self.phi, obj);
            let grads = g.backward(root);
            (bt.grads(&grads, &self.theta), bp.grads(&grads, &self.phi))
        };
        let mut report = Report::default();
        let smooth = obj.is_smooth();
        for (name, tensor) in self.theta.iter() {
            let analytic = g_theta.expect(name);
            for (idx, _) in tensor.indexed_iter() {
                let f = |h: f64| {
                    let mut t = self.theta.clone();
                    t.get_mut(name).unwrap()[idx] += h;
                    self.value(&t, &self.phi, obj)
                };
                report.record(format!("{}[{name}{idx:?}]", obj.name()), analytic[idx], smooth, f);
            }
        }
        for (name, tensor) in self.phi.iter() {
            let analytic = g_phi.expect(name);
            for (idx, _) in tensor.indexed_iter() {
                let f = |h: f64| {
                    let mut p = self.phi.clone();
                    p.get_mut(name).unwrap()[idx] += h;
                    self.value(&self.theta, &p, obj)
                };
                report.record(format!("{}[{name}{idx:?}]", obj.name()), analytic[idx], smooth, f);
            }
        }
        report
    }
}

/// Objective evaluated directly on its tensor inputs: logits for `L_rec`,
/// `(h1, h2)` for `L_con`, `(h1, h2, z1, z2)` for `L_cl2` and `(z1, z2)`
/// for `R`.
fn input_value(obj: Objective, inputs: &[Tensor], targets: &[ItemId]) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, true)).collect();
    let root = match obj {
        Objective::Rec => rec_loss_node(&mut g, vars[0], targets),
        Objective::Con => info_nce_node(&mut g, vars[0], vars[1], 1.0),
        Objective::Cl2 => contrastive_nodes(&mut g, vars[0], vars[1], vars[2], vars[3], 1.0).cl2,
        Objective::Reg => reg_node(&mut g, vars[0], vars[1]),
    };
    let grads = g.backward(root);
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.dim())))
        .collect();
    (g.scalar(root), gs)
}

pub fn check_inputs(obj: Objective, seed: u64) -> Report {
    let mut r = rng::stream(seed, &[78]);
    let b = 3;
    let (inputs, targets): (Vec<Tensor>, Vec<ItemId>) = match obj {
        Objective::Rec => (
            vec![Tensor::from_shape_fn((b, NUM_ITEMS), |_| r.gen_range(-2.0..2.0))],
            (0..b).map(|_| r.gen_range(1..=NUM_ITEMS as ItemId)).collect(),
        ),
        _ => {
            let count = match obj {
                Objective::Cl2 => 4,
                _ => 2,
            };
            let ts = (0..count)
                .map(|_| Tensor::from_shape_fn((b, D), |_| r.gen_range(-1.0..1.0)))
                .collect();
            (ts, Vec::new())
        }
    };
    let (_, analytic) = input_value(obj, &inputs, &targets);
    let mut report = Report::default();
    for (k, t) in inputs.iter().enumerate() {
        for (idx, _) in t.indexed_iter() {
            let f = |h: f64| {
                let mut shifted = inputs.clone();
                shifted[k][idx] += h;
                input_value(obj, &shifted, &targets).0
            };
            report.record(format!("{}[input{k}{idx:?}]", obj.name()), analytic[k][idx], obj.is_smooth(), f);
        }
    }
    report
}

/// Inputs and parameters for one objective over several random toys.
pub fn check_objective(obj: Objective, seeds: impl IntoIterator<Item = u64>) -> Report {
    let mut total = Report::default();
    for seed in seeds {
        total.merge(check_inputs(obj, seed));
        total.merge(Toy::new(seed).check_params(obj));
    }
    total
}
