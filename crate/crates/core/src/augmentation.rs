//! Stochastic sequence augmentation: crop, mask and reorder.
//!
//! Operators work on the unpadded item list; callers re-pad the result when
//! building a batch, so padding never falls inside a window.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemId, SequenceBatch};
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Crop,
    Mask,
    Reorder,
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentKind::Crop => "crop",
            AugmentKind::Mask => "mask",
            AugmentKind::Reorder => "reorder",
        })
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "crop" => Ok(AugmentKind::Crop),
            "mask" => Ok(AugmentKind::Mask),
            "reorder" => Ok(AugmentKind::Reorder),
            other => Err(Error::Config(format!(
                "unknown augmentation `{other}` (expected crop, mask or reorder)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentOp {
    pub kind: AugmentKind,
    /// In (0, 1].
    pub ratio: f64,
}

impl AugmentOp {
    pub fn new(kind: AugmentKind, ratio: f64) -> Result<Self, Error> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!(
                "{kind} ratio must be in (0, 1], got {ratio}"
            )));
        }
        Ok(Self { kind, ratio })
    }

    pub fn apply(&self, seq: &[ItemId], mask_id: ItemId, rng: &mut impl Rng) -> Vec<ItemId> {
        match self.kind {
            AugmentKind::Crop => crop(seq, self.ratio, rng),
            AugmentKind::Mask => mask(seq, self.ratio, mask_id, rng),
            AugmentKind::Reorder => reorder(seq, self.ratio, rng),
        }
    }
}

/// Which operators form the augmentation set and their ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub ops: Vec<AugmentKind>,
    pub crop_ratio: f64,
    pub mask_ratio: f64,
    pub reorder_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            ops: vec![AugmentKind::Crop, AugmentKind::Mask, AugmentKind::Reorder],
            crop_ratio: 0.6,
            mask_ratio: 0.3,
            reorder_ratio: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn ratio(&self, kind: AugmentKind) -> f64 {
        match kind {
            AugmentKind::Crop => self.crop_ratio,
            AugmentKind::Mask => self.mask_ratio,
            AugmentKind::Reorder => self.reorder_ratio,
        }
    }

    pub fn operators(&self) -> Result<Vec<AugmentOp>, Error> {
        if self.ops.is_empty() {
            return Err(Error::Config("aug.ops must name at least one operator".into()));
        }
        self.ops.iter().map(|&k| AugmentOp::new(k, self.ratio(k))).collect()
    }
}

/// `⌊ratio·len⌋`, tolerant of representation error in products like 0.3·10.
fn scaled(ratio: f64, len: usize) -> usize {
    (ratio * len as f64 + 1e-9).floor() as usize
}

pub fn window_len(ratio: f64, len: usize) -> usize {
    scaled(ratio, len).max(1).min(len)
}

pub fn mask_count(ratio: f64, len: usize) -> usize {
    scaled(ratio, len).min(len)
}

/// Contiguous window of length `max(1, ⌊ratio·L⌋)` starting at `start`.
pub fn crop_at(seq: &[ItemId], ratio: f64, start: usize) -> Vec<ItemId> {
    let w = window_len(ratio, seq.len());
    seq[start..start + w].to_vec()
}

pub fn crop(seq: &[ItemId], ratio: f64, rng: &mut impl Rng) -> Vec<ItemId> {
    if seq.is_empty() {
        return Vec::new();
    }
    let w = window_len(ratio, seq.len());
    let start = rng.gen_range(0..=seq.len() - w);
    crop_at(seq, ratio, start)
}

pub fn mask_positions(seq: &[ItemId], positions: &[usize], mask_id: ItemId) -> Vec<ItemId> {
    let mut out = seq.to_vec();
    for &p in positions {
        out[p] = mask_id;
    }
    out
}

/// Replaces `⌊ratio·L⌋` distinct positions, drawn without replacement, with
/// `mask_id`.
pub fn mask(seq: &[ItemId], ratio: f64, mask_id: ItemId, rng: &mut impl Rng) -> Vec<ItemId> {
    let count = mask_count(ratio, seq.len());
    let positions = index::sample(rng, seq.len(), count).into_vec();
    mask_positions(seq, &positions, mask_id)
}

/// Rearranges `seq[start..start + perm.len()]` so that slot `i` of the window
/// receives the item at window offset `perm[i]`.
pub fn reorder_window(seq: &[ItemId], start: usize, perm: &[usize]) -> Vec<ItemId> {
    let mut out = seq.to_vec();
    for (i, &p) in perm.iter().enumerate() {
        out[start + i] = seq[start + p];
    }
    out
}

pub fn reorder(seq: &[ItemId], ratio: f64, rng: &mut impl Rng) -> Vec<ItemId> {
    if seq.is_empty() {
        return Vec::new();
    }
    let w = window_len(ratio, seq.len());
    let start = rng.gen_range(0..=seq.len() - w);
    let mut perm: Vec<usize> = (0..w).collect();
    perm.shuffle(rng);
    reorder_window(seq, start, &perm)
}

/// The two data-augmented versions of one source sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedPair {
    pub kinds: (AugmentKind, AugmentKind),
    pub view1: Vec<ItemId>,
    pub view2: Vec<ItemId>,
}

/// Draws `g₁, g₂` independently and uniformly from `ops` (with replacement)
/// and applies each to `seq`.
pub fn sample_pair(
    seq: &[ItemId],
    ops: &[AugmentOp],
    mask_id: ItemId,
    rng: &mut impl Rng,
) -> AugmentedPair {
    assert!(!ops.is_empty(), "augmentation set must be nonempty");
    let g1 = ops[rng.gen_range(0..ops.len())];
    let g2 = ops[rng.gen_range(0..ops.len())];
    let view1 = g1.apply(seq, mask_id, rng);
    let view2 = g2.apply(seq, mask_id, rng);
    AugmentedPair {
        kinds: (g1.kind, g2.kind),
        view1,
        view2,
    }
}

/// Augments every row of `batch`, returning the two view batches (same
/// targets, users and width as the source).
pub fn augment_batch(
    batch: &SequenceBatch,
    ops: &[AugmentOp],
    mask_id: ItemId,
    rng: &mut impl Rng,
) -> (SequenceBatch, SequenceBatch) {
    let empty = || SequenceBatch::from_rows(std::iter::empty(), batch.seq_len);
    let (mut v1, mut v2) = (empty(), empty());
    for b in 0..batch.len() {
        let pair = sample_pair(batch.items(b), ops, mask_id, rng);
        v1.push_row(&pair.view1, batch.targets[b], batch.users[b]);
        v2.push_row(&pair.view2, batch.targets[b], batch.users[b]);
    }
    (v1, v2)
}
