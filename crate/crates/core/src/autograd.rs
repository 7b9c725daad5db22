//! A small reverse-mode tape over dense row-major matrices.
//!
//! Every value on the tape is a 2-D `f64` matrix. Sequence tensors of shape
//! `[batch × n × d]` are stored flattened as `[batch·n × d]`; the attention
//! op is the only place that needs to know about the sequence structure.
//!
//! Loss functions are recorded as fused scalar nodes that carry their own
//! local gradients (see [`Graph::scalar_op`]), which keeps the tape small
//! and lets the loss math live next to its definition in `objectives`.

use std::borrow::Cow;

use ndarray::{Array2, Axis, Zip};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Rows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Elu(Var),
    Mask(Var, Tensor),
    Attention(Box<AttentionCache>),
    Scalar {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    seq_len: usize,
    heads: usize,
    lengths: Vec<usize>,
    /// Softmax weights, `[batch][head][query][key]` flattened.
    probs: Vec<f64>,
    /// Inverted-dropout multipliers applied to `probs`, same layout.
    keep: Option<Vec<f64>>,
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Layout and masking information for [`Graph::causal_attention`].
#[derive(Clone, Debug)]
pub struct AttentionSpec<'a> {
    pub seq_len: usize,
    pub heads: usize,
    /// True (non-pad) length of each sequence; sequences are left-padded.
    pub lengths: &'a [usize],
    /// Optional inverted-dropout multipliers for the attention weights,
    /// laid out as `[batch][head][query][key]`.
    pub keep: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A borrowed leaf, typically a parameter tensor.
    pub fn leaf(&mut self, value: &'p Tensor, trainable: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let g = self.grad_any(&[a, b]);
        self.push(Cow::Owned(out), Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let g = self.grad_any(&[a, b]);
        self.push(Cow::Owned(out), Op::MatMulT(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let g = self.grad_any(&[a, b]);
        self.push(Cow::Owned(out), Op::Add(a, b), g)
    }

    /// Adds a `[1 × cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let out = self.value(x) + self.value(row);
        let g = self.grad_any(&[x, row]);
        self.push(Cow::Owned(out), Op::AddRow(x, row), g)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        let g = self.grad_any(&[x]);
        self.push(Cow::Owned(out), Op::Scale(x, c), g)
    }

    /// Row gather: `out[r] = x[index[r]]`. Used for embedding lookups and
    /// for picking the last time step of each sequence.
    pub fn rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let src = self.value(x);
        let cols = src.ncols();
        let mut out = Tensor::zeros((index.len(), cols));
        for (r, &i) in index.iter().enumerate() {
            assert!(
                i < src.nrows(),
                "row index {i} out of range for {} rows",
                src.nrows()
            );
            out.row_mut(r).assign(&src.row(i));
        }
        let g = self.grad_any(&[x]);
        self.push(Cow::Owned(out), Op::Rows(x, index), g)
    }

    /// Row-wise layer normalization with learned `[1 × d]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let s = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * s);
            inv_std.push(s);
        }
        let out = &normed * self.value(gain) + self.value(bias);
        let g = self.grad_any(&[x, gain, bias]);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            g,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let g = self.grad_any(&[x]);
        self.push(Cow::Owned(out), Op::Gelu(x), g)
    }

    /// ELU with unit scale: identity on positive inputs, `eˣ − 1` below zero.
    pub fn elu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .mapv(|v| if v > 0.0 { v } else { v.exp_m1() });
        let g = self.grad_any(&[x]);
        self.push(Cow::Owned(out), Op::Elu(x), g)
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mask(&mut self, x: Var, m: Tensor) -> Var {
        assert_eq!(self.value(x).dim(), m.dim(), "mask shape mismatch");
        let out = self.value(x) * &m;
        let g = self.grad_any(&[x]);
        self.push(Cow::Owned(out), Op::Mask(x, m), g)
    }

    /// Multi-head causal self-attention over left-padded sequences.
    ///
    /// `q`, `k`, `v` are `[batch·n × d]`. Query `i` of sequence `b` attends to
    /// keys `j` with `j ≤ i` and `j ≥ n − lengths[b]`; queries with no valid
    /// key (pad positions) produce zeros.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec<'_>) -> Var {
        let n = spec.seq_len;
        let heads = spec.heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let rows = qv.nrows();
        let d = qv.ncols();
        assert!(n > 0 && rows % n == 0, "rows must be a multiple of seq_len");
        assert!(heads > 0 && d % heads == 0, "d must divide into heads");
        let batch = rows / n;
        assert_eq!(spec.lengths.len(), batch, "one length per sequence");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            qv.as_slice().expect("standard layout"),
            kv.as_slice().expect("standard layout"),
            vv.as_slice().expect("standard layout"),
        );
        if let Some(keep) = &spec.keep {
            assert_eq!(keep.len(), batch * heads * n * n, "attention dropout layout");
        }

        let mut probs = vec![0.0; batch * heads * n * n];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; n];
        for b in 0..batch {
            let first = n - spec.lengths[b].min(n);
            for h in 0..heads {
                let off = h * dh;
                for i in first..n {
                    let qrow = &qs[(b * n + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in first..=i {
                        let krow = &ks[(b * n + j) * d + off..][..dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in &mut scores[first..=i] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let base = ((b * heads + h) * n + i) * n;
                    let orow = &mut out[(b * n + i) * d + off..][..dh];
                    for j in first..=i {
                        let p = scores[j] / z;
                        probs[base + j] = p;
                        let w = match &spec.keep {
                            Some(keep) => p * keep[base + j],
                            None => p,
                        };
                        let vrow = &vs[(b * n + j) * d + off..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_shape_vec((rows, d), out).expect("shape");
        let g = self.grad_any(&[q, k, v]);
        let cache = AttentionCache {
            q,
            k,
            v,
            seq_len: n,
            heads,
            lengths: spec.lengths.to_vec(),
            probs,
            keep: spec.keep,
        };
        self.push(Cow::Owned(out), Op::Attention(Box::new(cache)), g)
    }

    /// Records a scalar-valued function of `inputs` whose value and local
    /// gradients have already been computed.
    pub fn scalar_op(&mut self, inputs: Vec<Var>, value: f64, grads: Vec<Tensor>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).dim(), g.dim(), "local gradient shape");
        }
        let g = self.grad_any(&inputs);
        self.push(
            Cow::Owned(Tensor::from_elem((1, 1), value)),
            Op::Scalar { inputs, grads },
            g,
        )
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum::<f64>();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let g = self.grad_any(&vars);
        self.push(
            Cow::Owned(Tensor::from_elem((1, 1), total)),
            Op::WeightedSum(terms.to_vec()),
            g,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => *t += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.needs_grad(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.needs_grad(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if self.needs_grad(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::Rows(x, index) => {
                if self.needs_grad(*x) {
                    let mut out = Tensor::zeros(self.value(*x).dim());
                    for (r, &i) in index.iter().enumerate() {
                        let mut dst = out.row_mut(i);
                        dst += &g.row(r);
                    }
                    acc(*x, out);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                if self.needs_grad(*gain) {
                    acc(*gain, (g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs_grad(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs_grad(*x) {
                    let gx_hat = g * self.value(*gain);
                    let d = normed.ncols() as f64;
                    let mut gx = Tensor::zeros(normed.dim());
                    for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                        let gh = gx_hat.row(r);
                        let xh = normed.row(r);
                        let sum_g = gh.sum();
                        let sum_gx = gh.dot(&xh);
                        let s = inv_std[r] / d;
                        Zip::from(&mut out)
                            .and(&gh)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = s * (d * a - sum_g - b * sum_gx));
                    }
                    acc(*x, gx);
                }
            }
            Op::Gelu(x) => {
                let mut out = self.value(*x).clone();
                Zip::from(&mut out).and(g).for_each(|v, &gv| {
                    let x = *v;
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *v = gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                });
                acc(*x, out);
            }
            Op::Elu(x) => {
                let mut out = self.value(*x).clone();
                Zip::from(&mut out).and(g).for_each(|v, &gv| {
                    *v = if *v > 0.0 { gv } else { gv * v.exp() };
                });
                acc(*x, out);
            }
            Op::Mask(x, m) => acc(*x, g * m),
            Op::Attention(cache) => {
                let (dq, dk, dv) = self.attention_backward(cache, g);
                acc(cache.q, dq);
                acc(cache.k, dk);
                acc(cache.v, dv);
            }
            Op::Scalar { inputs, grads: local } => {
                let up = g[[0, 0]];
                for (v, lg) in inputs.iter().zip(local) {
                    if self.needs_grad(*v) {
                        acc(*v, lg * up);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let up = g[[0, 0]];
                for &(v, w) in terms {
                    acc(v, Tensor::from_elem((1, 1), w * up));
                }
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let n = c.seq_len;
        let heads = c.heads;
        let qv = self.value(c.q);
        let rows = qv.nrows();
        let d = qv.ncols();
        let batch = rows / n;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = qv.as_slice().expect("standard layout");
        let ks = self.value(c.k).as_slice().expect("standard layout");
        let vs = self.value(c.v).as_slice().expect("standard layout");
        let gs = g.as_standard_layout();
        let gs = gs.as_slice().expect("standard layout");

        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; n];
        for b in 0..batch {
            let first = n - c.lengths[b].min(n);
            for h in 0..heads {
                let off = h * dh;
                for i in first..n {
                    let base = ((b * heads + h) * n + i) * n;
                    let grow = &gs[(b * n + i) * d + off..][..dh];
                    // dL/dp_ij through the (dropped-out) weights.
                    let mut weighted = 0.0;
                    for j in first..=i {
                        let keep = c.keep.as_ref().map_or(1.0, |k| k[base + j]);
                        let p = c.probs[base + j];
                        let vrow = &vs[(b * n + j) * d + off..][..dh];
                        dp[j] = dot(grow, vrow) * keep;
                        weighted += dp[j] * p;
                        let dvrow = &mut dv[(b * n + j) * d + off..][..dh];
                        for (o, x) in dvrow.iter_mut().zip(grow) {
                            *o += p * keep * x;
                        }
                    }
                    let qrow = &qs[(b * n + i) * d + off..][..dh];
                    for j in first..=i {
                        let ds = c.probs[base + j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &ks[(b * n + j) * d + off..][..dh];
                        let dqrow = &mut dq[(b * n + i) * d + off..][..dh];
                        for (o, x) in dqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let dkrow = &mut dk[(b * n + j) * d + off..][..dh];
                        for (o, x) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        let shape = (rows, d);
        (
            Tensor::from_shape_vec(shape, dq).expect("shape"),
            Tensor::from_shape_vec(shape, dk).expect("shape"),
            Tensor::from_shape_vec(shape, dv).expect("shape"),
        )
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if no gradient
    /// reached it (frozen or disconnected).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
