//! Flat `key = value` experiment configuration with dotted namespaces.
//!
//! A file sets any subset of keys; command-line overrides are applied on
//! top; everything else keeps its default. [`ExperimentConfig::to_text`]
//! writes every key, so a run directory's `config.txt` reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use mclrec_core::augmentation::AugmentKind;
use mclrec_core::corpus::{LengthRange, SplitPart};
use mclrec_core::evaluation::{DEFAULT_KS, NOISE_RATIOS};
use mclrec_core::objectives::LossWeights;
use mclrec_core::trainer::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = ConfigMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`, got `{line}`", i + 1))?;
            let k = k.trim();
            if k.is_empty() {
                bail!("{origin}:{}: empty key", i + 1);
            }
            if map.entries.insert(k.to_owned(), v.trim().to_owned()).is_some() {
                bail!("{origin}:{}: key `{k}` set twice", i + 1);
            }
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{pair}` is not of the form key=value"))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: Option<PathBuf>,
    pub name: String,
    pub min_interactions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub variants: Vec<Variant>,
    pub batch_sizes: Vec<usize>,
    pub noise_ratios: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub groups: Vec<LengthRange>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let grid = vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5];
        Self {
            variants: Variant::ALL.to_vec(),
            batch_sizes: vec![64, 128, 256],
            noise_ratios: NOISE_RATIOS.to_vec(),
            lambdas: grid.clone(),
            betas: grid,
            groups: vec![LengthRange::exactly(5), LengthRange::between(6, 8), LengthRange::above(8)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportConfig {
    pub split: SplitPart,
    /// Export at most this many users; all when absent.
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub sweep: SweepConfig,
    pub export: ExportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            dataset: DatasetConfig {
                path: None,
                name: "custom".into(),
                min_interactions: 5,
            },
            ks: DEFAULT_KS.to_vec(),
            seeds: vec![train.seed],
            train,
            out: PathBuf::from("runs"),
            sweep: SweepConfig::default(),
            export: ExportConfig {
                split: SplitPart::Test,
                limit: None,
            },
        }
    }
}

/// `(λ, β)` defaults for the named public datasets.
pub fn dataset_weights(name: &str) -> Option<(f64, f64)> {
    match name.to_ascii_lowercase().as_str() {
        "sports" => Some((0.04, 0.4)),
        "beauty" => Some((0.0, 0.05)),
        "yelp" => Some((0.03, 0.1)),
        _ => None,
    }
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| anyhow!("{key}: cannot parse `{v}`: {e}"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_one(key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn split_name(p: SplitPart) -> &'static str {
    match p {
        SplitPart::Valid => "valid",
        SplitPart::Test => "test",
    }
}

impl ExperimentConfig {
    /// Builds a config from defaults plus `map`. Unknown keys are an error
    /// naming all of them.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut unknown = Vec::new();
        for (k, v) in map.iter() {
            let t = &mut c.train;
            match k {
                "dataset.path" => c.dataset.path = (!v.is_empty()).then(|| PathBuf::from(v)),
                "dataset.name" => c.dataset.name = v.to_owned(),
                "dataset.min_interactions" => c.dataset.min_interactions = parse_one(k, v)?,
                "train.lr_theta" => t.lr_theta = parse_one(k, v)?,
                "train.lr_phi" => t.lr_phi = parse_one(k, v)?,
                "train.batch_size" => t.batch_size = parse_one(k, v)?,
                "train.epochs" => t.epochs = parse_one(k, v)?,
                "train.patience" => t.early_stop_patience = parse_one(k, v)?,
                "train.variant" => t.variant = parse_one(k, v)?,
                "train.schedule" => t.schedule = parse_one(k, v)?,
                "train.expand_prefixes" => t.expand_prefixes = parse_one(k, v)?,
                "train.eval_batch_size" => t.eval_batch_size = parse_one(k, v)?,
                "loss.lambda" => t.weights.lambda = parse_one(k, v)?,
                "loss.beta" => t.weights.beta = parse_one(k, v)?,
                "loss.gamma" => t.weights.gamma = parse_one(k, v)?,
                "loss.temperature" => t.weights.temperature = parse_one(k, v)?,
                "model.hidden" => t.model.hidden = parse_one(k, v)?,
                "model.max_len" => t.model.max_len = parse_one(k, v)?,
                "model.blocks" => t.model.blocks = parse_one(k, v)?,
                "model.heads" => t.model.heads = parse_one(k, v)?,
                "model.dropout" => t.model.dropout = parse_one(k, v)?,
                "aug.ops" => t.augment.ops = parse_list::<AugmentKind>(k, v)?,
                "aug.crop_ratio" => t.augment.crop_ratio = parse_one(k, v)?,
                "aug.mask_ratio" => t.augment.mask_ratio = parse_one(k, v)?,
                "aug.reorder_ratio" => t.augment.reorder_ratio = parse_one(k, v)?,
                "eval.ks" => c.ks = parse_list(k, v)?,
                "run.seeds" => c.seeds = parse_list(k, v)?,
                "run.out" => c.out = PathBuf::from(v),
                "sweep.variants" => c.sweep.variants = parse_list(k, v)?,
                "sweep.batch_sizes" => c.sweep.batch_sizes = parse_list(k, v)?,
                "sweep.noise_ratios" => c.sweep.noise_ratios = parse_list(k, v)?,
                "sweep.lambdas" => c.sweep.lambdas = parse_list(k, v)?,
                "sweep.betas" => c.sweep.betas = parse_list(k, v)?,
                "sweep.groups" => c.sweep.groups = parse_list(k, v)?,
                "export.split" => {
                    c.export.split = match v {
                        "valid" => SplitPart::Valid,
                        "test" => SplitPart::Test,
                        _ => bail!("export.split: expected valid or test, got `{v}`"),
                    }
                }
                "export.limit" => c.export.limit = (!v.is_empty()).then(|| parse_one(k, v)).transpose()?,
                _ => unknown.push(k.to_owned()),
            }
        }
        if !unknown.is_empty() {
            bail!("unknown configuration keys: {}", unknown.join(", "));
        }

        if let Some((lambda, beta)) = dataset_weights(&c.dataset.name) {
            if !map.contains("loss.lambda") {
                c.train.weights.lambda = lambda;
            }
            if !map.contains("loss.beta") {
                c.train.weights.beta = beta;
            }
        }
        if !map.contains("loss.gamma") {
            c.train.weights.gamma = LossWeights::new(c.train.weights.lambda, c.train.weights.beta).gamma;
        }
        if c.seeds.is_empty() {
            bail!("run.seeds must list at least one seed");
        }
        c.train.seed = c.seeds[0];
        if c.ks.is_empty() || c.ks.contains(&0) {
            bail!("eval.ks must be a nonempty list of positive cutoffs");
        }
        c.train.validate()?;
        Ok(c)
    }

    pub fn to_map(&self) -> ConfigMap {
        let t = &self.train;
        let mut m = ConfigMap::default();
        let path = self.dataset.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        m.set("dataset.path", path);
        m.set("dataset.name", &self.dataset.name);
        m.set("dataset.min_interactions", self.dataset.min_interactions.to_string());
        m.set("train.lr_theta", t.lr_theta.to_string());
        m.set("train.lr_phi", t.lr_phi.to_string());
        m.set("train.batch_size", t.batch_size.to_string());
        m.set("train.epochs", t.epochs.to_string());
        m.set("train.patience", t.early_stop_patience.to_string());
        m.set("train.variant", t.variant.to_string());
        m.set("train.schedule", t.schedule.to_string());
        m.set("train.expand_prefixes", t.expand_prefixes.to_string());
        m.set("train.eval_batch_size", t.eval_batch_size.to_string());
        m.set("loss.lambda", t.weights.lambda.to_string());
        m.set("loss.beta", t.weights.beta.to_string());
        m.set("loss.gamma", t.weights.gamma.to_string());
        m.set("loss.temperature", t.weights.temperature.to_string());
        m.set("model.hidden", t.model.hidden.to_string());
        m.set("model.max_len", t.model.max_len.to_string());
        m.set("model.blocks", t.model.blocks.to_string());
        m.set("model.heads", t.model.heads.to_string());
        m.set("model.dropout", t.model.dropout.to_string());
        m.set("aug.ops", join(&t.augment.ops));
        m.set("aug.crop_ratio", t.augment.crop_ratio.to_string());
        m.set("aug.mask_ratio", t.augment.mask_ratio.to_string());
        m.set("aug.reorder_ratio", t.augment.reorder_ratio.to_string());
        m.set("eval.ks", join(&self.ks));
        m.set("run.seeds", join(&self.seeds));
        m.set("run.out", self.out.display().to_string());
        m.set("sweep.variants", join(&self.sweep.variants));
        m.set("sweep.batch_sizes", join(&self.sweep.batch_sizes));
        m.set("sweep.noise_ratios", join(&self.sweep.noise_ratios));
        m.set("sweep.lambdas", join(&self.sweep.lambdas));
        m.set("sweep.betas", join(&self.sweep.betas));
        m.set("sweep.groups", join(&self.sweep.groups));
        m.set("export.split", split_name(self.export.split));
        m.set("export.limit", self.export.limit.map(|l| l.to_string()).unwrap_or_default());
        m
    }

    pub fn to_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// This config pinned to a single seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_setup() {
        let c = ExperimentConfig::from_map(&ConfigMap::default()).unwrap();
        assert_eq!(c.train.model.hidden, 64);
        assert_eq!(c.train.model.max_len, 50);
        assert_eq!((c.train.model.blocks, c.train.model.heads), (2, 2));
        assert_eq!((c.train.lr_theta, c.train.lr_phi), (1e-3, 1e-3));
        assert_eq!(c.train.batch_size, 256);
    }

    #[test]
    fn text_round_trip() {
        let mut m = ConfigMap::parse(
            "# comment\ndataset.name = yelp\ntrain.variant = joint\nsweep.groups = =5,6-8,>8\naug.ops = crop, mask\n",
            "t",
        )
        .unwrap();
        m.set_pair("run.seeds=1,2,3").unwrap();
        let c = ExperimentConfig::from_map(&m).unwrap();
        let back = ExperimentConfig::from_map(&ConfigMap::parse(&c.to_text(), "rt").unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.train.augment.ops, vec![AugmentKind::Crop, AugmentKind::Mask]);
    }

    #[test]
    fn dataset_defaults_yield_to_explicit_keys() {
        let m = ConfigMap::parse("dataset.name = Sports\n", "t").unwrap();
        let w = ExperimentConfig::from_map(&m).unwrap().train.weights;
        assert_eq!((w.lambda, w.beta), (0.04, 0.4));
        assert!((w.gamma - 0.04).abs() < 1e-15);

        let m = ConfigMap::parse("dataset.name = sports\nloss.beta = 0.2\nloss.gamma = 0\n", "t").unwrap();
        let w = ExperimentConfig::from_map(&m).unwrap().train.weights;
        assert_eq!((w.lambda, w.beta, w.gamma), (0.04, 0.2, 0.0));
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let m = ConfigMap::parse("model.hiden = 3\ntrain.epochs = 2\nfoo = 1\n", "t").unwrap();
        let err = ExperimentConfig::from_map(&m).unwrap_err().to_string();
        assert!(err.contains("model.hiden") && err.contains("foo"), "{err}");
    }

    #[test]
    fn malformed_lines_report_position() {
        let err = ConfigMap::parse("a = 1\nnonsense\n", "cfg.txt").unwrap_err().to_string();
        assert!(err.starts_with("cfg.txt:2"), "{err}");
        let err = ExperimentConfig::from_map(&ConfigMap::parse("train.epochs = many", "t").unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.epochs"), "{err}");
    }
}
