//! Two-stage meta-optimization.
//!
//! Stage 1 updates the encoder θ on
//! `L0 = L_rec + λ·L_cl1 + β·L_cl2 + γ·R` with the augmenters frozen.
//! Stage 2 re-encodes the same augmented sequences under the updated,
//! frozen encoder and updates the augmenters φ on `L1 = L_cl2 + γ·R`.
//! The joint variant instead takes one step on `L0` over all parameters.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_batch, AugmentConfig, AugmentOp};
use crate::augmenter::{AugmenterConfig, Augmenters};
use crate::autograd::Graph;
use crate::corpus::{make_batches, DatasetSplit, Example, ItemId, SequenceBatch};
use crate::encoder::{Encoder, EncoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, RankingMetrics, DEFAULT_KS};
use crate::objectives::{contrastive_nodes, rec_loss_node, LossBreakdown, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCl1,
    NoCl2,
    NoReg,
    SharedAugmenters,
    Joint,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoCl1,
        Variant::NoCl2,
        Variant::NoReg,
        Variant::SharedAugmenters,
        Variant::Joint,
    ];

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "(A) full",
            Variant::NoCl1 => "(B) w/o cl1",
            Variant::NoCl2 => "(C) w/o cl2",
            Variant::NoReg => "(D) w/o reg",
            Variant::SharedAugmenters => "(E) share",
            Variant::Joint => "joint",
        }
    }

    /// Stage-1 weights after switching off this variant's removed term.
    pub fn weights(self, w: &LossWeights) -> LossWeights {
        let mut w = *w;
        match self {
            Variant::NoCl1 => w.lambda = 0.0,
            Variant::NoCl2 => w.beta = 0.0,
            Variant::NoReg => w.gamma = 0.0,
            _ => {}
        }
        w
    }

    /// Coefficient of `L_cl2` in the stage-2 objective.
    pub fn stage2_cl2_weight(self) -> f64 {
        if self == Variant::NoCl2 {
            0.0
        } else {
            1.0
        }
    }

    pub fn shares_augmenters(self) -> bool {
        self == Variant::SharedAugmenters
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoCl1 => "no_cl1",
            Variant::NoCl2 => "no_cl2",
            Variant::NoReg => "no_reg",
            Variant::SharedAugmenters => "shared_augmenters",
            Variant::Joint => "joint",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected full, no_cl1, no_cl2, no_reg, shared_augmenters or joint)"
                ))
            })
    }
}

/// How the two stages interleave within an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Stage 1 then stage 2 on every batch.
    PerBatch,
    /// Stage 1 over all batches, then stage 2 over the same augmented
    /// batches.
    PerEpoch,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::PerBatch => "per_batch",
            Schedule::PerEpoch => "per_epoch",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "per_batch" => Ok(Schedule::PerBatch),
            "per_epoch" => Ok(Schedule::PerEpoch),
            other => Err(Error::Config(format!(
                "unknown schedule `{other}` (expected per_batch or per_epoch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub variant: Variant,
    pub schedule: Schedule,
    pub seed: u64,
    /// Train on every prefix of each training sequence instead of only its
    /// last item.
    pub expand_prefixes: bool,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            weights: LossWeights::default(),
            batch_size: 256,
            epochs: 300,
            early_stop_patience: 10,
            variant: Variant::Full,
            schedule: Schedule::PerBatch,
            seed: 2022,
            expand_prefixes: true,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            eval_batch_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let checks = [
            (self.lr_theta > 0.0, "lr_theta must be positive"),
            (self.lr_phi > 0.0, "lr_phi must be positive"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.eval_batch_size >= 1, "eval_batch_size must be at least 1"),
            (
                w.lambda >= 0.0 && w.beta >= 0.0 && w.gamma >= 0.0,
                "loss weights must be non-negative",
            ),
            (w.temperature > 0.0, "temperature must be positive"),
            (
                (0.0..1.0).contains(&self.model.dropout),
                "dropout must be in [0, 1)",
            ),
            (
                self.model.hidden > 0 && self.model.heads > 0 && self.model.hidden % self.model.heads == 0,
                "hidden size must be a positive multiple of heads",
            ),
            (self.model.max_len >= 1, "max_len must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        self.augment.operators()?;
        Ok(())
    }
}

/// Position of a step within a run; keys every random stream it uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepId {
    pub epoch: usize,
    pub step: usize,
}

impl StepId {
    fn stream(self, seed: u64, which: u64) -> rng::StreamRng {
        rng::stream(seed, &[which, self.epoch as u64, self.step as u64])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Joint,
}

/// One batch together with its two data-augmented versions.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub original: SequenceBatch,
    pub view1: SequenceBatch,
    pub view2: SequenceBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub at: StepId,
    pub stage: Stage,
    pub losses: LossBreakdown,
    /// Present when the observer asks for checksums.
    pub theta_checksum: Option<u64>,
    pub phi_checksum: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage1: LossBreakdown,
    /// Absent for the joint variant.
    pub stage2: Option<LossBreakdown>,
    pub valid: Option<RankingMetrics>,
    pub seconds: f64,
}

pub trait TrainObserver {
    fn on_step(&mut self, _event: &StepEvent) {}
    /// Called after validation, with the state as of the end of the epoch.
    fn on_epoch(&mut self, _record: &EpochRecord, _state: &TrainState) {}
    fn wants_checksums(&self) -> bool {
        false
    }
}

impl TrainObserver for () {}

/// Model, parameters and optimizer state. θ and φ live in separate
/// parameter sets with separate optimizers.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub encoder: Encoder,
    pub augmenters: Augmenters,
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub opt_theta: Adam,
    pub opt_phi: Adam,
    pub epoch: usize,
    /// Best validation NDCG@20 and the epoch it was reached.
    pub best: Option<(f64, usize)>,
    ops: Vec<AugmentOp>,
    mask_id: ItemId,
    seed: u64,
}

fn grad_norm(p: &ParamSet) -> f64 {
    p.iter().map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

fn all_finite(p: &ParamSet) -> bool {
    p.iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
}

impl TrainState {
    pub fn new(num_items: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(EncoderConfig::new(num_items, &cfg.model));
        let augmenters = Augmenters::new(AugmenterConfig::new(
            cfg.model.hidden,
            cfg.variant.shares_augmenters(),
        ));
        let theta = encoder.init(cfg.seed);
        let phi = augmenters.init(cfg.seed);
        Self::from_parts(encoder, augmenters, theta, phi, cfg)
    }

    /// Fresh optimizer state around existing parameters.
    pub fn from_parts(
        encoder: Encoder,
        augmenters: Augmenters,
        theta: ParamSet,
        phi: ParamSet,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        Ok(Self {
            opt_theta: Adam::new(AdamConfig::with_lr(cfg.lr_theta), &theta),
            opt_phi: Adam::new(AdamConfig::with_lr(cfg.lr_phi), &phi),
            ops: cfg.augment.operators()?,
            mask_id: encoder.cfg.num_items as ItemId + 1,
            seed: cfg.seed,
            encoder,
            augmenters,
            theta,
            phi,
            epoch: 0,
            best: None,
        })
    }

    pub fn augment(&self, batch: &SequenceBatch, at: StepId) -> AugmentedBatch {
        self.augment_with(batch, &mut at.stream(self.seed, tag::AUGMENT))
    }

    pub fn augment_with(&self, batch: &SequenceBatch, rng: &mut impl Rng) -> AugmentedBatch {
        let (view1, view2) = augment_batch(batch, &self.ops, self.mask_id, rng);
        AugmentedBatch {
            original: batch.clone(),
            view1,
            view2,
        }
    }

    fn non_finite(&self, at: StepId, stage: &'static str, losses: &LossBreakdown, grads: &[(&str, f64)]) -> Error {
        Error::NonFinite {
            epoch: at.epoch,
            step: at.step,
            stage,
            losses: format!("{losses:?}"),
            grad_norms: grads.iter().map(|(n, g)| format!("{n}={g}")).collect::<Vec<_>>().join(", "),
        }
    }

    /// Encoder step on `L0` with the augmenters frozen, or, for the joint
    /// variant, one step on `L0` over both groups. Returns the augmented
    /// batch for the following stage-2 step.
    pub fn train_step_stage1(
        &mut self,
        batch: &SequenceBatch,
        cfg: &TrainConfig,
        at: StepId,
    ) -> Result<(LossBreakdown, AugmentedBatch)> {
        let aug = self.augment(batch, at);
        let joint = cfg.variant == Variant::Joint;
        let w = cfg.variant.weights(&cfg.weights);
        let seed = self.seed;

        let (losses, g_theta, g_phi) = {
            let mut g = Graph::new();
            let pt = self.theta.bind(&mut g, true);
            let pp = self.phi.bind(&mut g, joint);
            let enc = &self.encoder;
            let rec_out = enc.forward(&mut g, &pt, &aug.original, Some(at.stream(seed, tag::DROPOUT_REC)));
            let logits = enc.score(&mut g, &pt, rec_out.last);
            let rec = rec_loss_node(&mut g, logits, &aug.original.targets);
            let h1 = enc.forward(&mut g, &pt, &aug.view1, Some(at.stream(seed, tag::DROPOUT_VIEW1))).last;
            let h2 = enc.forward(&mut g, &pt, &aug.view2, Some(at.stream(seed, tag::DROPOUT_VIEW2))).last;
            let (z1, z2) = self.augmenters.forward(&mut g, &pp, h1, h2);
            let c = contrastive_nodes(&mut g, h1, h2, z1, z2, w.temperature);
            let total = g.weighted_sum(&[(rec, 1.0), (c.cl1, w.lambda), (c.cl2, w.beta), (c.reg, w.gamma)]);
            let mut losses = LossBreakdown::compose(
                Some(g.scalar(rec)),
                g.scalar(c.cl1),
                g.scalar(c.cl2),
                g.scalar(c.reg),
                &w,
            );
            losses.stage2_total = cfg.variant.stage2_cl2_weight() * losses.cl2 + w.gamma * losses.reg;
            debug_assert!((g.scalar(total) - losses.stage1_total.unwrap()).abs() < 1e-9 * (1.0 + g.scalar(total).abs()));
            let grads = g.backward(total);
            let g_theta = pt.grads(&grads, &self.theta);
            let g_phi = joint.then(|| pp.grads(&grads, &self.phi));
            (losses, g_theta, g_phi)
        };

        let theta_ok = all_finite(&g_theta);
        let phi_ok = g_phi.as_ref().is_none_or(all_finite);
        if !losses.is_finite() || !theta_ok || !phi_ok {
            let mut norms = vec![("theta", grad_norm(&g_theta))];
            if let Some(gp) = &g_phi {
                norms.push(("phi", grad_norm(gp)));
            }
            let stage = if joint { "joint" } else { "stage1" };
            return Err(self.non_finite(at, stage, &losses, &norms));
        }
        self.opt_theta.step(&mut self.theta, &g_theta);
        if let Some(gp) = g_phi {
            self.opt_phi.step(&mut self.phi, &gp);
        }
        Ok((losses, aug))
    }

    /// Augmenter step on `L1` against the frozen encoder. The views are
    /// re-encoded under the current θ.
    pub fn train_step_stage2(
        &mut self,
        aug: &AugmentedBatch,
        cfg: &TrainConfig,
        at: StepId,
    ) -> Result<LossBreakdown> {
        let w = cfg.variant.weights(&cfg.weights);
        let c2 = cfg.variant.stage2_cl2_weight();
        let seed = self.seed;
        let h1 = self
            .encoder
            .encode(&self.theta, &aug.view1, Some(at.stream(seed, tag::DROPOUT_REENCODE1)))
            .last;
        let h2 = self
            .encoder
            .encode(&self.theta, &aug.view2, Some(at.stream(seed, tag::DROPOUT_REENCODE2)))
            .last;

        let (losses, g_phi) = {
            let mut g = Graph::new();
            let pp = self.phi.bind(&mut g, true);
            let (h1, h2) = (g.constant(h1), g.constant(h2));
            let (z1, z2) = self.augmenters.forward(&mut g, &pp, h1, h2);
            let c = contrastive_nodes(&mut g, h1, h2, z1, z2, w.temperature);
            let total = g.weighted_sum(&[(c.cl2, c2), (c.reg, w.gamma)]);
            let mut losses = LossBreakdown::compose(None, g.scalar(c.cl1), g.scalar(c.cl2), g.scalar(c.reg), &w);
            losses.stage2_total = g.scalar(total);
            let grads = g.backward(total);
            (losses, pp.grads(&grads, &self.phi))
        };
        if !losses.is_finite() || !all_finite(&g_phi) {
            return Err(self.non_finite(at, "stage2", &losses, &[("phi", grad_norm(&g_phi))]));
        }
        self.opt_phi.step(&mut self.phi, &g_phi);
        Ok(losses)
    }

    /// Plain next-item step on the encoder, using the same dropout stream
    /// as the recommendation pass of stage 1.
    pub fn train_step_rec(&mut self, batch: &SequenceBatch, at: StepId) -> Result<f64> {
        let (loss, g_theta) = {
            let mut g = Graph::new();
            let pt = self.theta.bind(&mut g, true);
            let out = self
                .encoder
                .forward(&mut g, &pt, batch, Some(at.stream(self.seed, tag::DROPOUT_REC)));
            let logits = self.encoder.score(&mut g, &pt, out.last);
            let rec = rec_loss_node(&mut g, logits, &batch.targets);
            let grads = g.backward(rec);
            (g.scalar(rec), pt.grads(&grads, &self.theta))
        };
        if !loss.is_finite() || !all_finite(&g_theta) {
            let losses = LossBreakdown {
                rec: Some(loss),
                ..Default::default()
            };
            return Err(self.non_finite(at, "rec", &losses, &[("theta", grad_norm(&g_theta))]));
        }
        self.opt_theta.step(&mut self.theta, &g_theta);
        Ok(loss)
    }

    fn emit(&self, obs: &mut dyn TrainObserver, at: StepId, stage: Stage, losses: LossBreakdown) {
        let sums = obs.wants_checksums();
        obs.on_step(&StepEvent {
            at,
            stage,
            losses,
            theta_checksum: sums.then(|| self.theta.checksum()),
            phi_checksum: sums.then(|| self.phi.checksum()),
        });
    }

    /// One pass over the training rows. Returns mean stage-1 and stage-2
    /// losses; the epoch counter advances.
    pub fn train_epoch(
        &mut self,
        examples: &[Example],
        cfg: &TrainConfig,
        obs: &mut dyn TrainObserver,
    ) -> Result<(LossBreakdown, Option<LossBreakdown>)> {
        let epoch = self.epoch;
        let shuffle = rng::derive_seed(self.seed, &[tag::SHUFFLE, epoch as u64]);
        let batches: Vec<SequenceBatch> =
            make_batches(examples, cfg.batch_size, self.encoder.cfg.max_len, Some(shuffle)).collect();
        let mut s1 = Vec::with_capacity(batches.len());
        let mut s2 = Vec::with_capacity(batches.len());
        let joint = cfg.variant == Variant::Joint;
        match (joint, cfg.schedule) {
            (true, _) => {
                for (step, batch) in batches.iter().enumerate() {
                    let at = StepId { epoch, step };
                    let (l, _) = self.train_step_stage1(batch, cfg, at)?;
                    self.emit(obs, at, Stage::Joint, l);
                    s1.push(l);
                }
            }
            (false, Schedule::PerBatch) => {
                for (step, batch) in batches.iter().enumerate() {
                    let at = StepId { epoch, step };
                    let (l, aug) = self.train_step_stage1(batch, cfg, at)?;
                    self.emit(obs, at, Stage::Stage1, l);
                    s1.push(l);
                    let l = self.train_step_stage2(&aug, cfg, at)?;
                    self.emit(obs, at, Stage::Stage2, l);
                    s2.push(l);
                }
            }
            (false, Schedule::PerEpoch) => {
                let mut augmented = Vec::with_capacity(batches.len());
                for (step, batch) in batches.iter().enumerate() {
                    let at = StepId { epoch, step };
                    let (l, aug) = self.train_step_stage1(batch, cfg, at)?;
                    self.emit(obs, at, Stage::Stage1, l);
                    s1.push(l);
                    augmented.push(aug);
                }
                for (step, aug) in augmented.iter().enumerate() {
                    let at = StepId { epoch, step };
                    let l = self.train_step_stage2(aug, cfg, at)?;
                    self.emit(obs, at, Stage::Stage2, l);
                    s2.push(l);
                }
            }
        }
        self.epoch += 1;
        Ok((LossBreakdown::mean(&s1), (!joint).then(|| LossBreakdown::mean(&s2))))
    }

    pub fn evaluate(&self, examples: &[Example], ks: &[usize], batch_size: usize) -> Result<RankingMetrics> {
        evaluate(&self.encoder, &self.theta, examples, ks, batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid_ndcg20: Option<f64>,
    pub stopped_early: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters from the best validation epoch (the last epoch when
    /// nothing was evaluated).
    pub state: TrainState,
    pub report: FitReport,
}

/// Trains until `cfg.epochs` or until validation NDCG@20 has not improved
/// for more than `cfg.early_stop_patience` consecutive epochs.
pub fn fit(
    split: &DatasetSplit,
    num_items: usize,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<FitOutcome> {
    let started = Instant::now();
    let examples = split.train_examples(cfg.expand_prefixes);
    if examples.is_empty() {
        return Err(Error::Config("no training rows; sequences are too short".into()));
    }
    let mut state = TrainState::new(num_items, cfg)?;
    let mut best: Option<(ParamSet, ParamSet)> = None;
    let mut report = FitReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_valid_ndcg20: None,
        stopped_early: false,
        seconds: 0.0,
    };
    let mut stale = 0;
    for _ in 0..cfg.epochs {
        let t = Instant::now();
        let epoch = state.epoch;
        let (stage1, stage2) = state.train_epoch(&examples, cfg, obs)?;
        let valid = if split.valid.is_empty() {
            None
        } else {
            Some(state.evaluate(&split.valid, &DEFAULT_KS, cfg.eval_batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            stage1,
            stage2,
            valid: valid.clone(),
            seconds: t.elapsed().as_secs_f64(),
        };

        let improved = valid
            .as_ref()
            .is_some_and(|v| state.best.is_none_or(|(b, _)| v.ndcg_at(20) > b));
        if improved {
            let score = valid.as_ref().map_or(f64::NAN, |v| v.ndcg_at(20));
            state.best = Some((score, epoch));
            best = Some((state.theta.clone(), state.phi.clone()));
        }
        obs.on_epoch(&record, &state);
        report.epochs.push(record);

        if valid.is_none() {
            continue;
        }
        if improved {
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.early_stop_patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((theta, phi)) = best {
        state.theta = theta;
        state.phi = phi;
    }
    report.best_epoch = state.best.map(|b| b.1);
    report.best_valid_ndcg20 = state.best.map(|b| b.0);
    report.seconds = started.elapsed().as_secs_f64();
    Ok(FitOutcome { state, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{split_leave_one_out, InteractionSequence};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            model: ModelConfig {
                hidden: 8,
                max_len: 6,
                blocks: 1,
                heads: 2,
                dropout: 0.2,
            },
            eval_batch_size: 8,
            ..TrainConfig::default()
        }
    }

    fn tiny_split() -> DatasetSplit {
        let seqs: Vec<_> = (0..10)
            .map(|u| InteractionSequence::new(format!("u{u}"), (0..7).map(|k| ((u + k) % 12 + 1) as ItemId).collect()))
            .collect();
        split_leave_one_out(&seqs).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
        assert_eq!("per_epoch".parse::<Schedule>().unwrap(), Schedule::PerEpoch);
    }

    #[test]
    fn variant_weights() {
        let w = LossWeights::new(0.2, 0.4);
        assert_eq!(Variant::NoCl1.weights(&w).lambda, 0.0);
        assert_eq!(Variant::NoCl2.weights(&w).beta, 0.0);
        assert_eq!(Variant::NoCl2.weights(&w).gamma, w.gamma);
        assert_eq!(Variant::NoReg.weights(&w).gamma, 0.0);
        assert_eq!(Variant::Full.weights(&w), w);
        assert_eq!(Variant::NoCl2.stage2_cl2_weight(), 0.0);
    }

    #[test]
    fn stages_touch_only_their_group() {
        let cfg = tiny_cfg();
        let split = tiny_split();
        let ex = split.train_examples(true);
        let mut st = TrainState::new(12, &cfg).unwrap();
        let batch = make_batches(&ex, 4, 6, None).next().unwrap();
        let at = StepId { epoch: 0, step: 0 };
        let (t0, p0) = (st.theta.checksum(), st.phi.checksum());
        let (_, aug) = st.train_step_stage1(&batch, &cfg, at).unwrap();
        assert_ne!(st.theta.checksum(), t0);
        assert_eq!(st.phi.checksum(), p0);
        let t1 = st.theta.checksum();
        let l2 = st.train_step_stage2(&aug, &cfg, at).unwrap();
        assert!(l2.rec.is_none());
        assert_eq!(st.theta.checksum(), t1);
        assert_ne!(st.phi.checksum(), p0);
    }

    #[test]
    fn joint_updates_both_groups_once() {
        let cfg = TrainConfig {
            variant: Variant::Joint,
            ..tiny_cfg()
        };
        let split = tiny_split();
        let mut st = TrainState::new(12, &cfg).unwrap();
        let (t0, p0) = (st.theta.checksum(), st.phi.checksum());
        let ex = split.train_examples(true);
        let (_, s2) = st.train_epoch(&ex, &cfg, &mut ()).unwrap();
        assert!(s2.is_none());
        let batches = ex.len().div_ceil(cfg.batch_size) as u64;
        assert_eq!(st.opt_theta.steps(), batches);
        assert_eq!(st.opt_phi.steps(), batches);
        assert_ne!(st.theta.checksum(), t0);
        assert_ne!(st.phi.checksum(), p0);
    }

    #[test]
    fn fit_reports_each_epoch_and_restores_best() {
        let cfg = tiny_cfg();
        let split = tiny_split();
        let out = fit(&split, 12, &cfg, &mut ()).unwrap();
        assert_eq!(out.report.epochs.len(), 2);
        assert!(out.report.epochs.iter().all(|e| e.valid.is_some() && e.stage2.is_some()));
        let best = out.report.best_valid_ndcg20.unwrap();
        let again = out.state.evaluate(&split.valid, &DEFAULT_KS, 8).unwrap();
        assert_eq!(again.ndcg_at(20), best);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = tiny_cfg();
        cfg.model.heads = 3;
        assert!(matches!(TrainState::new(5, &cfg), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.augment.ops.clear();
        assert!(TrainState::new(5, &cfg).is_err());
    }
}
