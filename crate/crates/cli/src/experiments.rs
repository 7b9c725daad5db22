//! Experiment suites built on `fit`: single runs, ablations, batch-size and
//! noise sweeps, weight grids and per-length-group training.
//!
//! Each fit can leave a run directory holding `config.txt`, `log.jsonl`,
//! `checkpoint.json` and `report.json`. The report is written once, by
//! rename, after everything else; with `resume` a finalized run is read
//! back instead of retrained.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mclrec_core::checkpoint::Checkpoint;
use mclrec_core::corpus::{
    group_by_length, load_corpus, split_leave_one_out, Corpus, DatasetSplit, InteractionSequence, ItemVocab, LengthRange,
    SplitPart,
};
use mclrec_core::evaluation::{noisy_examples, NoiseSpec, RankingMetrics};
use mclrec_core::trainer::{fit, EpochRecord, FitReport, StepEvent, TrainObserver, TrainState, Variant};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::report::{self, Table};

pub struct Dataset {
    pub name: String,
    pub corpus: Corpus,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn from_corpus(name: impl Into<String>, corpus: Corpus) -> Result<Self> {
        let split = split_leave_one_out(&corpus.sequences)?;
        Ok(Self {
            name: name.into(),
            corpus,
            split,
        })
    }

    pub fn from_sequences(name: impl Into<String>, sequences: Vec<InteractionSequence>, vocab: ItemVocab) -> Result<Self> {
        Self::from_corpus(name, Corpus { sequences, vocab })
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let Some(path) = &cfg.dataset.path else {
            bail!("no dataset given (set dataset.path or pass --dataset)");
        };
        let corpus = load_corpus(path, cfg.dataset.min_interactions)
            .with_context(|| format!("loading dataset {}", path.display()))?;
        Self::from_corpus(cfg.dataset.name.clone(), corpus)
    }

    pub fn num_items(&self) -> usize {
        self.corpus.vocab.size()
    }
}

/// Where a run writes its files, if anywhere.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub dir: Option<PathBuf>,
    /// Reuse finalized reports instead of retraining.
    pub resume: bool,
    /// Log every optimizer step, not only epochs.
    pub log_steps: bool,
    /// Also write a checkpoint every this many epochs (0 = best only).
    pub checkpoint_every: usize,
    /// Print one line per finished run to stderr.
    pub progress: bool,
}

impl Artifacts {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn child(&self, name: &str) -> Self {
        Self {
            dir: self.dir.as_ref().map(|d| d.join(name)),
            ..self.clone()
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write_atomic(&dir.join(name), contents)?;
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("finalizing {}", path.display()))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub fit_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub dataset: String,
    pub seed: u64,
    pub variant: Variant,
    pub config: String,
    pub fit: FitReport,
    pub valid: RankingMetrics,
    pub test: RankingMetrics,
    pub timings: Timings,
}

pub struct RunOutput {
    pub report: RunReport,
    /// Absent when the report was resumed from disk.
    pub state: Option<TrainState>,
}

struct RunLog<'a> {
    out: Option<BufWriter<File>>,
    artifacts: &'a Artifacts,
    cfg: &'a ExperimentConfig,
    error: Option<anyhow::Error>,
}

impl RunLog<'_> {
    fn line(&mut self, value: &impl Serialize) {
        if let Some(out) = &mut self.out {
            let res = serde_json::to_writer(&mut *out, value)
                .map_err(anyhow::Error::from)
                .and_then(|_| out.write_all(b"\n").map_err(Into::into));
            if let Err(e) = res {
                self.error.get_or_insert(e);
            }
        }
    }
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

impl TrainObserver for RunLog<'_> {
    fn on_step(&mut self, event: &StepEvent) {
        if self.artifacts.log_steps {
            self.line(&Tagged { kind: "step", body: event });
        }
    }

    fn on_epoch(&mut self, record: &EpochRecord, state: &TrainState) {
        self.line(&Tagged { kind: "epoch", body: record });
        let every = self.artifacts.checkpoint_every;
        if every > 0 && (record.epoch + 1) % every == 0 {
            if let Some(dir) = &self.artifacts.dir {
                let path = dir.join(format!("checkpoint-epoch{}.json", record.epoch + 1));
                if let Err(e) = Checkpoint::from_state(state, &self.cfg.train).save(&path) {
                    self.error.get_or_insert(e.into());
                }
            }
        }
    }
}

/// Trains and tests one configuration under its first seed.
pub fn run_single(ds: &Dataset, cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<RunOutput> {
    let cfg = cfg.with_seed(cfg.seeds[0]);
    if let Some(dir) = &artifacts.dir {
        let report_path = dir.join("report.json");
        if report_path.exists() {
            if !artifacts.resume {
                bail!("{} is already finalized; pass --resume or choose a fresh --out", report_path.display());
            }
            let report: RunReport = serde_json::from_str(&fs::read_to_string(&report_path)?)
                .with_context(|| format!("reading {}", report_path.display()))?;
            return Ok(RunOutput { report, state: None });
        }
    }
    artifacts.write("config.txt", &cfg.to_text())?;
    let mut log = RunLog {
        out: match &artifacts.dir {
            Some(dir) => Some(BufWriter::new(File::create(dir.join("log.jsonl"))?)),
            None => None,
        },
        artifacts,
        cfg: &cfg,
        error: None,
    };
    let t = Instant::now();
    let outcome = fit(&ds.split, ds.num_items(), &cfg.train, &mut log)?;
    let fit_seconds = t.elapsed().as_secs_f64();
    if let Some(out) = &mut log.out {
        out.flush()?;
    }
    if let Some(e) = log.error.take() {
        return Err(e.context("writing the training log"));
    }

    let t = Instant::now();
    let state = outcome.state;
    let bs = cfg.train.eval_batch_size;
    let valid = state.evaluate(&ds.split.valid, &cfg.ks, bs)?;
    let test = state.evaluate(&ds.split.test, &cfg.ks, bs)?;
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_owned(),
        dataset: ds.name.clone(),
        seed: cfg.train.seed,
        variant: cfg.train.variant,
        config: cfg.to_text(),
        fit: outcome.report,
        valid,
        test,
        timings: Timings {
            fit_seconds,
            eval_seconds: t.elapsed().as_secs_f64(),
        },
    };
    if let Some(dir) = &artifacts.dir {
        Checkpoint::from_state(&state, &cfg.train).save(dir.join("checkpoint.json"))?;
    }
    artifacts.write("report.json", &serde_json::to_string_pretty(&report)?)?;
    if artifacts.progress {
        eprintln!(
            "{} seed {} {}: test HR@20 {:.4} NDCG@20 {:.4} ({:.0}s)",
            ds.name,
            report.seed,
            report.variant,
            report.test.hr_at(20),
            report.test.ndcg_at(20),
            fit_seconds
        );
    }
    Ok(RunOutput {
        report,
        state: Some(state),
    })
}

/// One run per seed.
pub fn run_train(ds: &Dataset, cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_single(ds, &cfg.with_seed(seed), &artifacts.child(&format!("seed-{seed}")))?;
        reports.push(run.report);
    }
    let table = Table::from_reports(&reports, &cfg.ks, |r| format!("seed {}", r.seed));
    finish_sweep(artifacts, "train", &table)?;
    Ok(reports)
}

fn finish_sweep(artifacts: &Artifacts, title: &str, table: &Table) -> Result<()> {
    artifacts.write("summary.csv", &table.to_csv())?;
    artifacts.write("summary.txt", &table.to_text())?;
    artifacts.write("summary.json", &serde_json::to_string_pretty(&report::SweepSummary::new(title, table))?)?;
    Ok(())
}

/// One fit per (variant, seed); every variant sees the same seeds.
pub fn run_ablation(ds: &Dataset, cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for &variant in &cfg.sweep.variants {
        for &seed in &cfg.seeds {
            let mut c = cfg.with_seed(seed);
            c.train.variant = variant;
            let dir = artifacts.child(&format!("{variant}/seed-{seed}"));
            reports.push(run_single(ds, &c, &dir)?.report);
        }
    }
    let table = Table::from_reports(&reports, &cfg.ks, |r| format!("{} seed {}", r.variant.label(), r.seed))
        .with_means(&reports, &cfg.ks, |r| r.variant.label().to_owned());
    finish_sweep(artifacts, "ablation", &table)?;
    Ok(reports)
}

pub fn run_batch_sweep(ds: &Dataset, cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for &size in &cfg.sweep.batch_sizes {
        for &seed in &cfg.seeds {
            let mut c = cfg.with_seed(seed);
            c.train.batch_size = size;
            reports.push(run_single(ds, &c, &artifacts.child(&format!("batch-{size}/seed-{seed}")))?.report);
        }
    }
    let batch = |r: &RunReport| {
        let c = crate::config::ConfigMap::parse(&r.config, "report").ok();
        c.and_then(|m| m.get("train.batch_size").map(str::to_owned)).unwrap_or_default()
    };
    let table = Table::from_reports(&reports, &cfg.ks, |r| format!("batch {} seed {}", batch(r), r.seed))
        .with_means(&reports, &cfg.ks, |r| format!("batch {}", batch(r)));
    finish_sweep(artifacts, "batch_sweep", &table)?;
    Ok(reports)
}

/// Test metrics under each noise ratio; ratio 0 is the clean test set.
/// Noise depends only on `noise_seed`, so every model sees the same noisy
/// sequences.
pub fn noise_curve(
    state: &TrainState,
    ds: &Dataset,
    ratios: &[f64],
    ks: &[usize],
    batch_size: usize,
    noise_seed: u64,
) -> Result<Vec<(f64, RankingMetrics)>> {
    let mut out = vec![(0.0, state.evaluate(&ds.split.test, ks, batch_size)?)];
    for &ratio in ratios.iter().filter(|&&r| r > 0.0) {
        let spec = NoiseSpec { ratio, seed: noise_seed };
        let noisy = noisy_examples(&ds.split.test, &spec, &ds.corpus.vocab)?;
        out.push((ratio, state.evaluate(&noisy, ks, batch_size)?));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub seed: u64,
    pub variant: Variant,
    pub ratio: f64,
    pub test: RankingMetrics,
}

/// Trains once per seed, then evaluates the test set under each ratio.
pub fn run_noise_sweep(ds: &Dataset, cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<Vec<NoiseRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let c = cfg.with_seed(seed);
        let dir = artifacts.child(&format!("seed-{seed}"));
        let run = run_single(ds, &c, &dir)?;
        let state = match run.state {
            Some(s) => s,
            None => Checkpoint::load(dir.dir.as_ref().expect("resumed runs have a directory").join("checkpoint.json"))?
                .into_state()?,
        };
        for (ratio, test) in noise_curve(&state, ds, &cfg.sweep.noise_ratios, &cfg.ks, c.train.eval_batch_size, seed)? {
            rows.push(NoiseRow {
                seed,
                variant: c.train.variant,
                ratio,
                test,
            });
        }
    }
    let table = Table::from_rows(
        rows.iter().map(|r| (format!("noise {:.2} seed {}", r.ratio, r.seed), &r.test)),
        &cfg.ks,
    );
    finish_sweep(artifacts, "noise_sweep", &table)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub valid_ndcg20: f64,
    pub test: RankingMetrics,
    pub runs: Vec<RunReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    /// Cell with the best mean validation NDCG@20.
    pub best: usize,
}

pub fn run_weight_grid(ds: &Dataset, cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<GridReport> {
    let mut cells = Vec::new();
    for &lambda in &cfg.sweep.lambdas {
        for &beta in &cfg.sweep.betas {
            let mut runs = Vec::new();
            for &seed in &cfg.seeds {
                let mut c = cfg.with_seed(seed);
                c.train.weights.lambda = lambda;
                c.train.weights.beta = beta;
                c.train.weights.gamma = 0.1 * beta;
                let dir = artifacts.child(&format!("lambda-{lambda}_beta-{beta}/seed-{seed}"));
                runs.push(run_single(ds, &c, &dir)?.report);
            }
            let n = runs.len() as f64;
            cells.push(GridCell {
                lambda,
                beta,
                gamma: 0.1 * beta,
                valid_ndcg20: runs.iter().map(|r| r.valid.ndcg_at(20)).sum::<f64>() / n,
                test: RankingMetrics::merge(&runs.iter().map(|r| r.test.clone()).collect::<Vec<_>>())?,
                runs,
            });
        }
    }
    if cells.is_empty() {
        bail!("weight grid is empty (set sweep.lambdas and sweep.betas)");
    }
    let best = (0..cells.len())
        .max_by(|&a, &b| cells[a].valid_ndcg20.total_cmp(&cells[b].valid_ndcg20))
        .expect("nonempty");
    let table = Table::from_rows(
        cells.iter().enumerate().map(|(i, c)| {
            let mark = if i == best { " *" } else { "" };
            (format!("lambda {} beta {}{mark}", c.lambda, c.beta), &c.test)
        }),
        &cfg.ks,
    );
    finish_sweep(artifacts, "weight_grid", &table)?;
    let report = GridReport { cells, best };
    artifacts.write("grid.json", &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: LengthRange,
    pub users: usize,
    pub seed: u64,
    pub test: RankingMetrics,
}

/// Splits users by full sequence length and trains and tests a separate
/// model on each group. All groups keep the full item vocabulary.
pub fn run_group_eval(ds: &Dataset, cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<Vec<GroupRow>> {
    let groups = group_by_length(&ds.corpus.sequences, &cfg.sweep.groups)?;
    let mut rows = Vec::new();
    for (range, seqs) in groups {
        if seqs.is_empty() {
            continue;
        }
        let users = seqs.len();
        let sub = Dataset::from_sequences(format!("{}[{range}]", ds.name), seqs, ds.corpus.vocab.clone())?;
        for &seed in &cfg.seeds {
            let dir = artifacts.child(&format!("group-{}/seed-{seed}", report::slug(&range.to_string())));
            let run = run_single(&sub, &cfg.with_seed(seed), &dir)?;
            rows.push(GroupRow {
                group: range,
                users,
                seed,
                test: run.report.test,
            });
        }
    }
    let table = Table::from_rows(
        rows.iter().map(|r| (format!("{} ({} users) seed {}", r.group, r.users, r.seed), &r.test)),
        &cfg.ks,
    );
    finish_sweep(artifacts, "group_eval", &table)?;
    Ok(rows)
}

pub fn load_checkpoint(path: &Path, ds: &Dataset) -> Result<TrainState> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.num_items != ds.num_items() {
        bail!(
            "checkpoint was trained on {} items but dataset {} has {}",
            ck.num_items,
            ds.name,
            ds.num_items()
        );
    }
    Ok(ck.into_state()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub part: SplitPart,
    pub overall: RankingMetrics,
    /// The same model's metrics restricted to each length group.
    pub groups: Vec<(LengthRange, RankingMetrics)>,
}

/// Evaluates a saved model on one split, overall and per length group.
pub fn run_eval(ds: &Dataset, cfg: &ExperimentConfig, checkpoint: &Path, part: SplitPart) -> Result<EvalReport> {
    let state = load_checkpoint(checkpoint, ds)?;
    let examples = ds.split.part(part);
    let bs = cfg.train.eval_batch_size;
    let overall = state.evaluate(examples, &cfg.ks, bs)?;
    let mut groups = Vec::new();
    for &range in &cfg.sweep.groups {
        let members: Vec<_> = examples
            .iter()
            .filter(|e| range.contains(ds.corpus.sequences[e.user].len()))
            .cloned()
            .collect();
        if !members.is_empty() {
            groups.push((range, state.evaluate(&members, &cfg.ks, bs)?));
        }
    }
    Ok(EvalReport { part, overall, groups })
}
