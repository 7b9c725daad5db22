//! Full-catalog ranking metrics, test-time noise injection and per-group
//! reporting.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::corpus::{Example, InteractionSequence, ItemId, ItemVocab, LengthRange, SequenceBatch};
use crate::encoder::{score_items, Encoder};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{self, StreamRng};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
}

impl RankingMetrics {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// User-count-weighted mean of metrics computed on disjoint user sets.
    pub fn merge(parts: &[RankingMetrics]) -> Result<RankingMetrics> {
        let total: usize = parts.iter().map(|m| m.n_users).sum();
        if total == 0 {
            return Err(Error::NoUsers);
        }
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for m in parts {
            let w = m.n_users as f64 / total as f64;
            for (k, v) in &m.hr {
                *hr.entry(*k).or_insert(0.0) += w * v;
            }
            for (k, v) in &m.ndcg {
                *ndcg.entry(*k).or_insert(0.0) += w * v;
            }
        }
        Ok(RankingMetrics {
            hr,
            ndcg,
            n_users: total,
        })
    }
}

/// 1-based rank of each row's target among all items. Items scoring the
/// same as the target count as ranked above it.
pub fn rank_target(logits: &Tensor, targets: &[ItemId]) -> Vec<usize> {
    assert_eq!(logits.nrows(), targets.len());
    targets
        .iter()
        .enumerate()
        .map(|(b, &t)| {
            assert!(t >= 1 && t as usize <= logits.ncols(), "target {t} out of range");
            let col = t as usize - 1;
            let row = logits.row(b);
            let score = row[col];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(i, &v)| i != col && v >= score)
                .count()
        })
        .collect()
}

/// HR@k = mean(rank ≤ k); NDCG@k = mean(rank ≤ k ? 1/log₂(rank + 1) : 0).
pub fn compute_metrics(ranks: &[usize], ks: &[usize]) -> Result<RankingMetrics> {
    if ranks.is_empty() {
        return Err(Error::NoUsers);
    }
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
        let gain: f64 = ranks
            .iter()
            .filter(|&&r| r <= k)
            .map(|&r| 1.0 / ((r + 1) as f64).log2())
            .sum();
        hr.insert(k, hits / n);
        ndcg.insert(k, gain / n);
    }
    Ok(RankingMetrics {
        hr,
        ndcg,
        n_users: ranks.len(),
    })
}

/// Ranks of each example's target under the encoder, dropout off.
pub fn rank_examples(
    encoder: &Encoder,
    params: &ParamSet,
    examples: &[Example],
    batch_size: usize,
) -> Vec<usize> {
    let mut ranks = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let rows: Vec<&Example> = chunk.iter().collect();
        let batch = SequenceBatch::from_examples(&rows, encoder.cfg.max_len);
        let repr = encoder.encode::<StreamRng>(params, &batch, None);
        let logits = score_items(&repr.last, params);
        ranks.extend(rank_target(&logits, &batch.targets));
    }
    ranks
}

pub fn evaluate(
    encoder: &Encoder,
    params: &ParamSet,
    examples: &[Example],
    ks: &[usize],
    batch_size: usize,
) -> Result<RankingMetrics> {
    compute_metrics(&rank_examples(encoder, params, examples, batch_size), ks)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Injected items relative to the sequence length.
    pub ratio: f64,
    pub seed: u64,
}

pub const NOISE_RATIOS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.30];

/// Inserts `⌈ratio·L⌉` distinct items that are neither in `items` nor in
/// `forbidden`, each at a uniformly drawn slot of the growing sequence.
///
/// Each insertion consumes the stream in the same way regardless of how
/// many follow, so under one seed a higher ratio extends the noise of a
/// lower one.
pub fn inject_noise_with(
    items: &[ItemId],
    ratio: f64,
    vocab: &ItemVocab,
    forbidden: &[ItemId],
    rng: &mut impl Rng,
) -> std::result::Result<Vec<ItemId>, (usize, usize)> {
    let count = (ratio * items.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    if count == 0 {
        return Ok(items.to_vec());
    }
    let mut taken: HashSet<ItemId> = items.iter().chain(forbidden).copied().collect();
    let available = (1..=vocab.size() as ItemId).filter(|i| !taken.contains(i)).count();
    if available < count {
        return Err((count, available));
    }
    let mut out = items.to_vec();
    for _ in 0..count {
        let item = loop {
            let cand = rng.gen_range(1..=vocab.size() as ItemId);
            if taken.insert(cand) {
                break cand;
            }
        };
        let at = rng.gen_range(0..=out.len());
        out.insert(at, item);
    }
    Ok(out)
}

pub fn inject_noise(
    seq: &InteractionSequence,
    spec: &NoiseSpec,
    vocab: &ItemVocab,
) -> Result<InteractionSequence> {
    let mut r = rng::stream(spec.seed, &[rng::tag::NOISE]);
    let items = inject_noise_with(&seq.items, spec.ratio, vocab, &[], &mut r).map_err(
        |(wanted, available)| Error::NegativesExhausted {
            user: seq.user.clone(),
            wanted,
            available,
        },
    )?;
    Ok(InteractionSequence {
        user: seq.user.clone(),
        items,
    })
}

/// Noisy copies of evaluation examples. Injected items avoid the input and
/// the held-out target; each user has an independent stream.
pub fn noisy_examples(examples: &[Example], spec: &NoiseSpec, vocab: &ItemVocab) -> Result<Vec<Example>> {
    examples
        .iter()
        .map(|e| {
            let mut r = rng::stream(spec.seed, &[rng::tag::NOISE, e.user as u64]);
            let input = inject_noise_with(&e.input, spec.ratio, vocab, &[e.target], &mut r).map_err(
                |(wanted, available)| Error::NegativesExhausted {
                    user: e.user.to_string(),
                    wanted,
                    available,
                },
            )?;
            Ok(Example {
                user: e.user,
                input,
                target: e.target,
            })
        })
        .collect()
}

/// Metrics per length group, in the given order.
pub fn evaluate_groups(
    encoder: &Encoder,
    params: &ParamSet,
    groups: &[(LengthRange, Vec<Example>)],
    ks: &[usize],
    batch_size: usize,
) -> Result<Vec<(LengthRange, RankingMetrics)>> {
    groups
        .iter()
        .map(|(range, examples)| Ok((*range, evaluate(encoder, params, examples, ks, batch_size)?)))
        .collect()
}

/// Aligned text table, one row per label: HR@k columns then NDCG@k columns.
pub fn metrics_table(rows: &[(String, &RankingMetrics)], ks: &[usize]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "model");
    for k in ks {
        let _ = write!(out, " {:>8}", format!("HR@{k}"));
    }
    for k in ks {
        let _ = write!(out, " {:>8}", format!("NDCG@{k}"));
    }
    out.push('\n');
    for (label, m) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for k in ks {
            let _ = write!(out, " {:>8.4}", m.hr_at(*k));
        }
        for k in ks {
            let _ = write!(out, " {:>8.4}", m.ndcg_at(*k));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ranks_with_ties_counted_against_target() {
        assert_eq!(rank_target(&array![[0.1, 0.9, 0.2]], &[2]), vec![1]);
        assert_eq!(rank_target(&Tensor::zeros((1, 100)), &[37]), vec![100]);
        assert_eq!(rank_target(&array![[0.3, 0.9, 0.5]], &[3]), vec![2]);
    }

    #[test]
    fn closed_form_metrics() {
        let m = compute_metrics(&[1, 1, 1], &DEFAULT_KS).unwrap();
        for k in DEFAULT_KS {
            assert_eq!(m.hr_at(k), 1.0);
            assert_eq!(m.ndcg_at(k), 1.0);
        }
        let m = compute_metrics(&[3], &[5]).unwrap();
        assert_eq!(m.hr_at(5), 1.0);
        assert_eq!(m.ndcg_at(5), 0.5);
        let m = compute_metrics(&[21], &[20]).unwrap();
        assert_eq!((m.hr_at(20), m.ndcg_at(20)), (0.0, 0.0));
        assert!(matches!(compute_metrics(&[], &[5]), Err(Error::NoUsers)));
    }

    #[test]
    fn metrics_are_bounded_and_monotone() {
        let ranks = [1, 4, 7, 12, 19, 25, 3, 2, 50, 8];
        let m = compute_metrics(&ranks, &DEFAULT_KS).unwrap();
        let mut prev = (0.0, 0.0);
        for k in DEFAULT_KS {
            let (h, n) = (m.hr_at(k), m.ndcg_at(k));
            assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&n));
            assert!(n <= h && h >= prev.0 && n >= prev.1);
            prev = (h, n);
        }
        let mut shuffled = ranks;
        shuffled.reverse();
        let r = compute_metrics(&shuffled, &DEFAULT_KS).unwrap();
        for k in DEFAULT_KS {
            assert_eq!(r.hr_at(k), m.hr_at(k));
            assert!((r.ndcg_at(k) - m.ndcg_at(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_weights_by_users() {
        let a = compute_metrics(&[1, 30], &[10]).unwrap();
        let b = compute_metrics(&[2, 5, 40, 1], &[10]).unwrap();
        let all = compute_metrics(&[1, 30, 2, 5, 40, 1], &[10]).unwrap();
        let merged = RankingMetrics::merge(&[a, b]).unwrap();
        assert_eq!(merged.n_users, 6);
        assert!((merged.hr_at(10) - all.hr_at(10)).abs() < 1e-12);
        assert!((merged.ndcg_at(10) - all.ndcg_at(10)).abs() < 1e-12);
    }

    #[test]
    fn noise_preserves_order_and_avoids_seen_items() {
        let vocab = ItemVocab::with_size(30);
        let seq = InteractionSequence::new("u", vec![1, 2, 3, 4, 5]);
        let spec = NoiseSpec { ratio: 0.2, seed: 3 };
        let out = inject_noise(&seq, &spec, &vocab).unwrap();
        assert_eq!(out.items.len(), 6);
        let kept: Vec<_> = out.items.iter().filter(|i| seq.items.contains(i)).copied().collect();
        assert_eq!(kept, seq.items);

        let zero = inject_noise(&seq, &NoiseSpec { ratio: 0.0, seed: 3 }, &vocab).unwrap();
        assert_eq!(zero, seq);
    }

    #[test]
    fn noise_errors_when_no_negatives_remain() {
        let vocab = ItemVocab::with_size(5);
        let seq = InteractionSequence::new("u9", vec![1, 2, 3, 4]);
        let err = inject_noise(&seq, &NoiseSpec { ratio: 0.5, seed: 1 }, &vocab).unwrap_err();
        assert!(err.to_string().contains("u9"), "{err}");
    }

    #[test]
    fn higher_ratio_extends_lower_ratio_noise() {
        let vocab = ItemVocab::with_size(200);
        let items: Vec<ItemId> = (1..=20).collect();
        let run = |ratio| inject_noise_with(&items, ratio, &vocab, &[], &mut rng::stream(5, &[])).unwrap();
        let low = run(0.1);
        let high = run(0.3);
        let noise = |v: &[ItemId]| v.iter().filter(|&&i| i > 20).copied().collect::<HashSet<_>>();
        assert!(noise(&low).is_subset(&noise(&high)));
        assert_eq!(noise(&high).len(), 6);
    }

    #[test]
    fn table_layout() {
        let m = compute_metrics(&[1, 6], &DEFAULT_KS).unwrap();
        let t = metrics_table(&[("full".into(), &m)], &DEFAULT_KS);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("HR@5") && lines[0].contains("NDCG@20"));
        assert!(lines[1].starts_with("full"));
        assert_eq!(lines[1].split_whitespace().count(), 7);
    }
}
