//! Loss terms: next-item cross-entropy, in-batch InfoNCE, the two
//! contrastive objectives built from it, and the margin-style contrastive
//! regularizer over positive/negative similarity scores.
//!
//! Each loss has a value function and a `*_with_grad` variant that also
//! returns the gradient with respect to its matrix inputs; the graph
//! wrappers at the bottom record the latter as fused scalar nodes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::corpus::ItemId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of `L_cl1`.
    pub lambda: f64,
    /// Weight of `L_cl2`.
    pub beta: f64,
    /// Weight of the regularizer `R`.
    pub gamma: f64,
    pub temperature: f64,
}

impl LossWeights {
    /// `γ = 0.1·β`, temperature 1.
    pub fn new(lambda: f64, beta: f64) -> Self {
        Self {
            lambda,
            beta,
            gamma: 0.1 * beta,
            temperature: 1.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            lambda: 0.0,
            beta: 0.0,
            gamma: 0.0,
            temperature: 1.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(0.1, 0.1)
    }
}

/// The four views of one batch: data-augmented `h1`, `h2` and their
/// model-augmented counterparts `z1`, `z2`, each `[batch × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewQuadruple {
    pub h1: Tensor,
    pub h2: Tensor,
    pub z1: Tensor,
    pub z2: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Absent for steps that never encode the un-augmented batch.
    pub rec: Option<f64>,
    pub cl1: f64,
    pub cl2: f64,
    pub reg: f64,
    pub stage1_total: Option<f64>,
    pub stage2_total: f64,
}

impl LossBreakdown {
    pub fn compose(rec: Option<f64>, cl1: f64, cl2: f64, reg: f64, w: &LossWeights) -> Self {
        Self {
            rec,
            cl1,
            cl2,
            reg,
            stage1_total: rec.map(|r| r + w.lambda * cl1 + w.beta * cl2 + w.gamma * reg),
            stage2_total: cl2 + w.gamma * reg,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cl1, self.cl2, self.reg, self.stage2_total]
            .into_iter()
            .chain(self.rec)
            .chain(self.stage1_total)
            .all(f64::is_finite)
    }

    /// Field-wise mean; optional fields average over the entries that have
    /// them.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let avg_opt = |f: fn(&LossBreakdown) -> Option<f64>| {
            let vals: Vec<f64> = items.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        LossBreakdown {
            rec: avg_opt(|b| b.rec),
            cl1: items.iter().map(|b| b.cl1).sum::<f64>() / n,
            cl2: items.iter().map(|b| b.cl2).sum::<f64>() / n,
            reg: items.iter().map(|b| b.reg).sum::<f64>() / n,
            stage1_total: avg_opt(|b| b.stage1_total),
            stage2_total: items.iter().map(|b| b.stage2_total).sum::<f64>() / n,
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn target_column(t: ItemId, items: usize) -> usize {
    assert!(
        t >= 1 && (t as usize) <= items,
        "target {t} outside the item range 1..={items}"
    );
    t as usize - 1
}

/// Mean next-item cross-entropy. Column `i` of `logits` scores item `i + 1`.
pub fn rec_loss(logits: &Tensor, targets: &[ItemId]) -> f64 {
    rec_loss_with_grad(logits, targets).0
}

pub fn rec_loss_with_grad(logits: &Tensor, targets: &[ItemId]) -> (f64, Tensor) {
    assert_eq!(logits.nrows(), targets.len());
    let batch = targets.len().max(1) as f64;
    let mut grad = Tensor::zeros(logits.dim());
    let mut total = 0.0;
    for (b, &t) in targets.iter().enumerate() {
        let col = target_column(t, logits.ncols());
        let row = logits.row(b);
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[col];
        for (g, &x) in grad.row_mut(b).iter_mut().zip(row.iter()) {
            *g = (x - lse).exp() / batch;
        }
        grad[[b, col]] -= 1.0 / batch;
    }
    (total / batch, grad)
}

/// Symmetric in-batch InfoNCE over positive pairs `(x1[b], x2[b])`.
///
/// For anchor `x1[b]` the candidates are its positive `x2[b]` and the
/// `2(B − 1)` negatives `x1[b']`, `x2[b']` for `b' ≠ b`; likewise for anchor
/// `x2[b]`. Similarity is the inner product divided by `tau`. The two
/// anchor terms are summed per row and averaged over rows.
pub fn info_nce(x1: &Tensor, x2: &Tensor, tau: f64) -> f64 {
    info_nce_with_grad(x1, x2, tau).0
}

pub fn info_nce_with_grad(x1: &Tensor, x2: &Tensor, tau: f64) -> (f64, Tensor, Tensor) {
    assert_eq!(x1.dim(), x2.dim(), "view shapes differ");
    let b = x1.nrows();
    let s12 = x1.dot(&x2.t()) / tau;
    let s11 = x1.dot(&x1.t()) / tau;
    let s22 = x2.dot(&x2.t()) / tau;
    let mut g12 = Tensor::zeros((b, b));
    let mut g11 = Tensor::zeros((b, b));
    let mut g22 = Tensor::zeros((b, b));
    let mut total = 0.0;
    for i in 0..b {
        // anchor x1[i]: cross row s12[i, ·], own-family row s11[i, ·≠i]
        let cross = s12.row(i);
        let own = s11.row(i);
        let lse = log_sum_exp(
            cross
                .iter()
                .copied()
                .chain(own.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v)),
        );
        total += lse - cross[i];
        for j in 0..b {
            g12[[i, j]] += (cross[j] - lse).exp();
            if j != i {
                g11[[i, j]] += (own[j] - lse).exp();
            }
        }
        g12[[i, i]] -= 1.0;

        // anchor x2[i]: cross column s12[·, i], own-family row s22[i, ·≠i]
        let cross = s12.column(i);
        let own = s22.row(i);
        let lse = log_sum_exp(
            cross
                .iter()
                .copied()
                .chain(own.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v)),
        );
        total += lse - cross[i];
        for j in 0..b {
            g12[[j, i]] += (cross[j] - lse).exp();
            if j != i {
                g22[[i, j]] += (own[j] - lse).exp();
            }
        }
        g12[[i, i]] -= 1.0;
    }
    let scale = 1.0 / (b.max(1) as f64 * tau);
    let g11s = &g11 + &g11.t();
    let g22s = &g22 + &g22.t();
    let dx1 = (g12.dot(x2) + g11s.dot(x1)) * scale;
    let dx2 = (g12.t().dot(x1) + g22s.dot(x2)) * scale;
    (total / b.max(1) as f64, dx1, dx2)
}

pub fn cl1_loss(views: &ViewQuadruple, tau: f64) -> f64 {
    info_nce(&views.h1, &views.h2, tau)
}

/// `L_con(z1, z2) + L_con(h1, z2) + L_con(h2, z1)`.
pub fn cl2_loss(views: &ViewQuadruple, tau: f64) -> f64 {
    info_nce(&views.z1, &views.z2, tau)
        + info_nce(&views.h1, &views.z2, tau)
        + info_nce(&views.h2, &views.z1, tau)
}

/// Similarity scores split into same-sequence (diagonal) and cross-sequence
/// (off-diagonal, row-major) entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSplit {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

pub fn contrast_split(z1: &Tensor, z2: &Tensor) -> ScoreSplit {
    assert_eq!(z1.dim(), z2.dim(), "view shapes differ");
    let s = z1.dot(&z2.t());
    let b = s.nrows();
    let mut positives = Vec::with_capacity(b);
    let mut negatives = Vec::with_capacity(b * b.saturating_sub(1));
    for ((i, j), &v) in s.indexed_iter() {
        if i == j {
            positives.push(v);
        } else {
            negatives.push(v);
        }
    }
    ScoreSplit {
        positives,
        negatives,
    }
}

/// Where a selected score came from, for routing its gradient.
#[derive(Clone, Copy)]
enum Src {
    Pos(usize),
    Neg(usize),
}

struct Bounds {
    o_min: (f64, Src),
    o_max: Option<(f64, Src)>,
}

fn bounds(split: &ScoreSplit) -> Bounds {
    let min_pos = split
        .positives
        .iter()
        .enumerate()
        .fold((f64::INFINITY, Src::Pos(0)), |acc, (i, &v)| {
            if v < acc.0 {
                (v, Src::Pos(i))
            } else {
                acc
            }
        });
    let max_neg = split
        .negatives
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(f64, Src)>, (j, &v)| match acc {
            Some(a) if a.0 >= v => Some(a),
            _ => Some((v, Src::Neg(j))),
        });
    match max_neg {
        None => Bounds {
            o_min: min_pos,
            o_max: None,
        },
        Some(max_neg) if min_pos.0 <= max_neg.0 => Bounds {
            o_min: min_pos,
            o_max: Some(max_neg),
        },
        Some(max_neg) => Bounds {
            o_min: max_neg,
            o_max: Some(min_pos),
        },
    }
}

/// `R = mean([σ⁺ − o_min]₊) + mean([o_max − σ⁻]₊)` with
/// `o_min = min(min σ⁺, max σ⁻)` and `o_max = max(min σ⁺, max σ⁻)`.
/// The second term is 0 when there are no negatives.
pub fn contrastive_reg(split: &ScoreSplit) -> f64 {
    contrastive_reg_with_grad(split).0
}

/// Value plus gradients with respect to the positive and negative scores.
/// The subgradient of `[a]₊` at `a = 0` is taken as 0.
pub fn contrastive_reg_with_grad(split: &ScoreSplit) -> (f64, Vec<f64>, Vec<f64>) {
    assert!(!split.positives.is_empty(), "need at least one positive score");
    let mut gp = vec![0.0; split.positives.len()];
    let mut gn = vec![0.0; split.negatives.len()];
    let route = |src: Src, delta: f64, gp: &mut [f64], gn: &mut [f64]| match src {
        Src::Pos(i) => gp[i] += delta,
        Src::Neg(j) => gn[j] += delta,
    };
    let Bounds { o_min, o_max } = bounds(split);

    let np = split.positives.len() as f64;
    let mut first = 0.0;
    for (i, &s) in split.positives.iter().enumerate() {
        let a = s - o_min.0;
        if a > 0.0 {
            first += a;
            gp[i] += 1.0 / np;
            route(o_min.1, -1.0 / np, &mut gp, &mut gn);
        }
    }
    let mut second = 0.0;
    if let Some(o_max) = o_max {
        let nn = split.negatives.len() as f64;
        for (j, &s) in split.negatives.iter().enumerate() {
            let a = o_max.0 - s;
            if a > 0.0 {
                second += a;
                gn[j] -= 1.0 / nn;
                route(o_max.1, 1.0 / nn, &mut gp, &mut gn);
            }
        }
        second /= nn;
    }
    (first / np + second, gp, gn)
}

/// Regularizer as a function of the model-augmented views.
pub fn reg_with_grad(z1: &Tensor, z2: &Tensor) -> (f64, Tensor, Tensor) {
    let split = contrast_split(z1, z2);
    let (value, gp, gn) = contrastive_reg_with_grad(&split);
    let b = z1.nrows();
    let mut ds = Tensor::zeros((b, b));
    let (mut p, mut q) = (0, 0);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                ds[[i, j]] = gp[p];
                p += 1;
            } else {
                ds[[i, j]] = gn[q];
                q += 1;
            }
        }
    }
    (value, ds.dot(z2), ds.t().dot(z1))
}

/// Value-level evaluation of every term for one batch.
pub fn stage_losses(
    views: &ViewQuadruple,
    logits: &Tensor,
    targets: &[ItemId],
    weights: &LossWeights,
) -> LossBreakdown {
    let tau = weights.temperature;
    LossBreakdown::compose(
        Some(rec_loss(logits, targets)),
        cl1_loss(views, tau),
        cl2_loss(views, tau),
        contrastive_reg(&contrast_split(&views.z1, &views.z2)),
        weights,
    )
}

// ---- graph nodes -----------------------------------------------------------

pub fn rec_loss_node(g: &mut Graph<'_>, logits: Var, targets: &[ItemId]) -> Var {
    let (v, grad) = rec_loss_with_grad(g.value(logits), targets);
    g.scalar_op(vec![logits], v, vec![grad])
}

pub fn info_nce_node(g: &mut Graph<'_>, x1: Var, x2: Var, tau: f64) -> Var {
    let (v, d1, d2) = info_nce_with_grad(g.value(x1), g.value(x2), tau);
    g.scalar_op(vec![x1, x2], v, vec![d1, d2])
}

pub fn reg_node(g: &mut Graph<'_>, z1: Var, z2: Var) -> Var {
    let (v, d1, d2) = reg_with_grad(g.value(z1), g.value(z2));
    g.scalar_op(vec![z1, z2], v, vec![d1, d2])
}

/// Graph handles for the contrastive terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveNodes {
    pub cl1: Var,
    pub cl2: Var,
    pub reg: Var,
}

pub fn contrastive_nodes(g: &mut Graph<'_>, h1: Var, h2: Var, z1: Var, z2: Var, tau: f64) -> ContrastiveNodes {
    let cl1 = info_nce_node(g, h1, h2, tau);
    let zz = info_nce_node(g, z1, z2, tau);
    let hz = info_nce_node(g, h1, z2, tau);
    let hz2 = info_nce_node(g, h2, z1, tau);
    let cl2 = g.weighted_sum(&[(zz, 1.0), (hz, 1.0), (hz2, 1.0)]);
    let reg = reg_node(g, z1, z2);
    ContrastiveNodes { cl1, cl2, reg }
}
