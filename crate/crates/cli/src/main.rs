use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mclrec_cli::config::{ConfigMap, ExperimentConfig};
use mclrec_cli::experiments::{self, Artifacts, Dataset};
use mclrec_cli::export;
use mclrec_cli::synth::{self, SynthConfig};
use mclrec_core::corpus::SplitPart;
use mclrec_core::evaluation::metrics_table;

#[derive(Parser)]
#[command(name = "mclrec", version, about = "Contrastive sequential recommendation with meta-learned augmenters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; repeat for several seeds (overrides run.seeds).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory (overrides run.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus file (overrides dataset.path).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Any config key, as key=value; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Reuse finalized runs under --out instead of failing.
    #[arg(long)]
    resume: bool,
    /// Log every optimizer step to log.jsonl.
    #[arg(long)]
    log_steps: bool,
    /// Additionally checkpoint every K epochs.
    #[arg(long, default_value_t = 0, value_name = "K")]
    checkpoint_every: usize,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and test, once per seed.
    Train(Common),
    /// Train every variant in sweep.variants under shared seeds.
    Ablate(Common),
    /// One run per batch size in sweep.batch_sizes.
    SweepBatch(Common),
    /// Train once, then test under each ratio in sweep.noise_ratios.
    SweepNoise(Common),
    /// One run per (lambda, beta) in sweep.lambdas × sweep.betas.
    Grid(Common),
    /// Split users by sequence length (sweep.groups) and train per group.
    Groups(Common),
    /// Evaluate a checkpoint, overall and per length group.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["valid", "test"])]
        split: String,
    },
    /// Write h1, h2, z1, z2 for one split to a tab-separated file.
    ExportViews {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 8)]
        min_len: usize,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        #[arg(long, default_value_t = 20)]
        clusters: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut map = match &c.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    if !c.seeds.is_empty() {
        map.set("run.seeds", c.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    }
    if let Some(out) = &c.out {
        map.set("run.out", out.display().to_string());
    }
    if let Some(ds) = &c.dataset {
        map.set("dataset.path", ds.display().to_string());
    }
    for pair in &c.overrides {
        map.set_pair(pair)?;
    }
    ExperimentConfig::from_map(&map)
}

/// The dataset is loaded before anything is written, so a bad path leaves
/// no output behind.
fn prepare(c: &Common) -> Result<(ExperimentConfig, Dataset)> {
    let cfg = load_config(c)?;
    let ds = Dataset::load(&cfg)?;
    Ok((cfg, ds))
}

fn artifacts(c: &Common, cfg: &ExperimentConfig) -> Artifacts {
    Artifacts {
        dir: Some(cfg.out.clone()),
        resume: c.resume,
        log_steps: c.log_steps,
        checkpoint_every: c.checkpoint_every,
        progress: !c.quiet,
    }
}

fn print_summary(cfg: &ExperimentConfig) -> Result<()> {
    let path = cfg.out.join("summary.txt");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            users,
            items,
            min_len,
            max_len,
            clusters,
            seed,
            output,
        } => {
            let cfg = SynthConfig {
                users,
                items,
                min_len,
                max_len,
                clusters,
                seed,
                ..SynthConfig::default()
            };
            let file = File::create(&output).with_context(|| format!("creating {}", output.display()))?;
            let mut w = BufWriter::new(file);
            synth::write_fixture(&cfg, &mut w)?;
            w.flush()?;
        }
        Command::Train(c) => {
            let (cfg, ds) = prepare(&c)?;
            experiments::run_train(&ds, &cfg, &artifacts(&c, &cfg))?;
            print_summary(&cfg)?;
        }
        Command::Ablate(c) => {
            let (cfg, ds) = prepare(&c)?;
            experiments::run_ablation(&ds, &cfg, &artifacts(&c, &cfg))?;
            print_summary(&cfg)?;
        }
        Command::SweepBatch(c) => {
            let (cfg, ds) = prepare(&c)?;
            experiments::run_batch_sweep(&ds, &cfg, &artifacts(&c, &cfg))?;
            print_summary(&cfg)?;
        }
        Command::SweepNoise(c) => {
            let (cfg, ds) = prepare(&c)?;
            experiments::run_noise_sweep(&ds, &cfg, &artifacts(&c, &cfg))?;
            print_summary(&cfg)?;
        }
        Command::Grid(c) => {
            let (cfg, ds) = prepare(&c)?;
            let grid = experiments::run_weight_grid(&ds, &cfg, &artifacts(&c, &cfg))?;
            print_summary(&cfg)?;
            let best = &grid.cells[grid.best];
            println!("best by validation NDCG@20: lambda {} beta {}", best.lambda, best.beta);
        }
        Command::Groups(c) => {
            let (cfg, ds) = prepare(&c)?;
            experiments::run_group_eval(&ds, &cfg, &artifacts(&c, &cfg))?;
            print_summary(&cfg)?;
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&common)?;
            let ds = Dataset::load(&cfg)?;
            let part = if split == "valid" { SplitPart::Valid } else { SplitPart::Test };
            let report = experiments::run_eval(&ds, &cfg, &checkpoint, part)?;
            let mut rows = vec![(format!("{split} (all)"), &report.overall)];
            rows.extend(report.groups.iter().map(|(g, m)| (format!("{split} {g}"), m)));
            print!("{}", metrics_table(&rows, &cfg.ks));
        }
        Command::ExportViews {
            common,
            checkpoint,
            output,
        } => {
            let cfg = load_config(&common)?;
            let ds = Dataset::load(&cfg)?;
            let dump = export::export_views(&checkpoint, &ds, &cfg, &output)?;
            eprintln!("wrote {} rows to {}", dump.len(), output.display());
        }
    }
    Ok(())
}
