//! Self-attentive sequence encoder.
//!
//! Item and learned position embeddings are summed, passed through a stack
//! of pre-norm causal self-attention blocks, and the hidden state at the
//! last position (the newest item under left padding) represents the
//! sequence. Next-item logits reuse the input item-embedding table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Tensor, Var};
use crate::corpus::SequenceBatch;
use crate::params::{glorot, uniform, Bound, ParamSet};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of real items, |I|.
    pub num_items: usize,
    /// Sequence length n.
    pub max_len: usize,
    /// Hidden size d.
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    pub fn new(num_items: usize, model: &ModelConfig) -> Self {
        Self {
            num_items,
            max_len: model.max_len,
            hidden: model.hidden,
            blocks: model.blocks,
            heads: model.heads,
            dropout: model.dropout,
            layer_norm_eps: 1e-8,
        }
    }
}

/// Architecture hyper-parameters independent of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            max_len: 50,
            blocks: 2,
            heads: 2,
            dropout: 0.5,
        }
    }
}

pub const ITEM_EMBEDDINGS: &str = "item_embeddings";
pub const POSITION_EMBEDDINGS: &str = "position_embeddings";

fn block_param(block: usize, name: &str) -> String {
    format!("block{block}.{name}")
}

/// Graph outputs of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[batch·n × d]`
    pub hidden: Var,
    /// `[batch × d]`, the last position of each sequence.
    pub last: Var,
}

/// Concrete outputs of [`Encoder::encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRepresentation {
    /// `[batch·n × d]`, row `b·n + k` is position `k` of sequence `b`.
    pub hidden: Tensor,
    /// `[batch × d]`
    pub last: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        assert!(cfg.hidden % cfg.heads == 0, "hidden size must divide into heads");
        Self { cfg }
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        let c = &self.cfg;
        let d = c.hidden;
        let mut rng = rng::stream(seed, &[rng::tag::INIT, 0]);
        let mut p = ParamSet::new();
        let emb_bound = 0.02 * 3f64.sqrt();
        p.insert(ITEM_EMBEDDINGS, uniform(&mut rng, c.num_items + 2, d, emb_bound));
        p.insert(POSITION_EMBEDDINGS, uniform(&mut rng, c.max_len, d, emb_bound));
        let linear = |p: &mut ParamSet, name: String, rng: &mut rng::StreamRng| {
            p.insert(format!("{name}.weight"), uniform(rng, d, d, glorot(d, d)));
            p.insert(format!("{name}.bias"), Tensor::zeros((1, d)));
        };
        for b in 0..c.blocks {
            for name in ["query", "key", "value", "attn_out", "ffn_in", "ffn_out"] {
                linear(&mut p, block_param(b, name), &mut rng);
            }
            for norm in ["attn_norm", "ffn_norm"] {
                p.insert(block_param(b, &format!("{norm}.gain")), Tensor::ones((1, d)));
                p.insert(block_param(b, &format!("{norm}.bias")), Tensor::zeros((1, d)));
            }
        }
        p.insert("final_norm.gain", Tensor::ones((1, d)));
        p.insert("final_norm.bias", Tensor::zeros((1, d)));
        p
    }

    /// `e[b, k] = M[ids[b, k]] + P[k]`, flattened to `[batch·n × d]`.
    pub fn embed(&self, g: &mut Graph<'_>, p: &Bound, batch: &SequenceBatch) -> Var {
        let n = self.cfg.max_len;
        assert_eq!(batch.seq_len, n, "batch width must equal the encoder's n");
        let limit = self.cfg.num_items + 2;
        let ids: Vec<usize> = batch
            .ids
            .iter()
            .map(|&id| {
                let id = id as usize;
                assert!(id < limit, "item id {id} outside embedding table of {limit} rows");
                id
            })
            .collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..n).collect();
        let items = g.rows(p.var(ITEM_EMBEDDINGS), ids);
        let pos = g.rows(p.var(POSITION_EMBEDDINGS), positions);
        g.add(items, pos)
    }

    fn dropout<R: Rng>(&self, g: &mut Graph<'_>, x: Var, rng: &mut Option<R>) -> Var {
        let rate = self.cfg.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let m = dropout_mask(rng, g.value(x).dim(), rate);
                g.mask(x, m)
            }
            _ => x,
        }
    }

    fn linear(&self, g: &mut Graph<'_>, p: &Bound, x: Var, name: &str) -> Var {
        let y = g.matmul(x, p.var(&format!("{name}.weight")));
        g.add_row(y, p.var(&format!("{name}.bias")))
    }

    fn norm(&self, g: &mut Graph<'_>, p: &Bound, x: Var, name: &str) -> Var {
        g.layer_norm(
            x,
            p.var(&format!("{name}.gain")),
            p.var(&format!("{name}.bias")),
            self.cfg.layer_norm_eps,
        )
    }

    /// Full forward pass. Dropout is active exactly when `rng` is `Some`.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        batch: &SequenceBatch,
        mut rng: Option<R>,
    ) -> Encoded {
        let c = &self.cfg;
        let n = c.max_len;
        let mut x = self.embed(g, p, batch);
        x = self.dropout(g, x, &mut rng);
        for b in 0..c.blocks {
            let h = self.norm(g, p, x, &block_param(b, "attn_norm"));
            let q = self.linear(g, p, h, &block_param(b, "query"));
            let k = self.linear(g, p, h, &block_param(b, "key"));
            let v = self.linear(g, p, h, &block_param(b, "value"));
            let keep = match &mut rng {
                Some(r) if c.dropout > 0.0 => Some(
                    dropout_mask(r, (1, batch.len() * c.heads * n * n), c.dropout).into_raw_vec_and_offset().0,
                ),
                _ => None,
            };
            let spec = AttentionSpec {
                seq_len: n,
                heads: c.heads,
                lengths: &batch.lengths,
                keep,
            };
            let a = g.causal_attention(q, k, v, spec);
            let o = self.linear(g, p, a, &block_param(b, "attn_out"));
            let o = self.dropout(g, o, &mut rng);
            x = g.add(x, o);

            let h = self.norm(g, p, x, &block_param(b, "ffn_norm"));
            let f = self.linear(g, p, h, &block_param(b, "ffn_in"));
            let f = g.gelu(f);
            let f = self.linear(g, p, f, &block_param(b, "ffn_out"));
            let f = self.dropout(g, f, &mut rng);
            x = g.add(x, f);
        }
        let hidden = self.norm(g, p, x, "final_norm");
        let last_rows = (0..batch.len()).map(|b| b * n + n - 1).collect();
        let last = g.rows(hidden, last_rows);
        Encoded { hidden, last }
    }

    /// Logits over real items `1..=|I|` (column `i` scores item `i + 1`):
    /// `last · M[1..=|I|]ᵀ`.
    pub fn score(&self, g: &mut Graph<'_>, p: &Bound, last: Var) -> Var {
        let rows = (1..=self.cfg.num_items).collect();
        let items = g.rows(p.var(ITEM_EMBEDDINGS), rows);
        g.matmul_t(last, items)
    }

    /// Convenience forward pass outside of training.
    pub fn encode<R: Rng>(&self, params: &ParamSet, batch: &SequenceBatch, rng: Option<R>) -> SequenceRepresentation {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, batch, rng);
        SequenceRepresentation {
            hidden: g.value(out.hidden).clone(),
            last: g.value(out.last).clone(),
        }
    }
}

/// Pre-softmax next-item scores `last · M[1..=|I|]ᵀ`, excluding pad and mask rows.
pub fn score_items(last: &Tensor, params: &ParamSet) -> Tensor {
    let m = params.expect(ITEM_EMBEDDINGS);
    let real = m.slice(ndarray::s![1..m.nrows() - 1, ..]);
    last.dot(&real.t())
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask(rng: &mut impl Rng, shape: (usize, usize), rate: f64) -> Tensor {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Tensor::from_shape_simple_fn(shape, || if rng.gen::<f64>() < keep { scale } else { 0.0 })
}
