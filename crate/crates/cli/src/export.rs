//! Dump of the four contrastive views for offline projection.
//!
//! One tab-separated line per sequence: batch index, row within the batch,
//! user, then the `d` columns of each of `h1`, `h2`, `z1`, `z2`. Floats use
//! the shortest representation that parses back to the same bits.

use std::io::{BufRead, Write};

use anyhow::{bail, Context, Result};
use mclrec_core::autograd::Tensor;
use mclrec_core::corpus::{make_batches, Example};
use mclrec_core::rng::{self, tag, StreamRng};
use mclrec_core::trainer::TrainState;

#[derive(Clone, Debug, PartialEq)]
pub struct ViewDump {
    pub batches: Vec<usize>,
    pub rows: Vec<usize>,
    pub users: Vec<String>,
    pub h1: Tensor,
    pub h2: Tensor,
    pub z1: Tensor,
    pub z2: Tensor,
}

impl ViewDump {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Augments each example with the export stream of `seed`, encodes both
/// views without dropout and applies the augmenters.
pub fn compute_views(
    state: &TrainState,
    examples: &[Example],
    user_names: &[String],
    batch_size: usize,
    seed: u64,
) -> ViewDump {
    let d = state.encoder.cfg.hidden;
    let n = state.encoder.cfg.max_len;
    let mut dump = ViewDump {
        batches: Vec::new(),
        rows: Vec::new(),
        users: Vec::new(),
        h1: Tensor::zeros((0, d)),
        h2: Tensor::zeros((0, d)),
        z1: Tensor::zeros((0, d)),
        z2: Tensor::zeros((0, d)),
    };
    let export_seed = rng::derive_seed(seed, &[tag::EXPORT]);
    for (b, batch) in make_batches(examples, batch_size, n, None).enumerate() {
        let aug = state.augment_with(&batch, &mut rng::stream(export_seed, &[b as u64]));
        let h1 = state.encoder.encode::<StreamRng>(&state.theta, &aug.view1, None).last;
        let h2 = state.encoder.encode::<StreamRng>(&state.theta, &aug.view2, None).last;
        let q = state.augmenters.augment_views(&h1, &h2, &state.phi);
        for row in 0..batch.len() {
            dump.batches.push(b);
            dump.rows.push(row);
            let u = batch.users[row];
            dump.users.push(user_names.get(u).cloned().unwrap_or_else(|| u.to_string()));
        }
        for (acc, part) in [(&mut dump.h1, &q.h1), (&mut dump.h2, &q.h2), (&mut dump.z1, &q.z1), (&mut dump.z2, &q.z2)] {
            for r in part.rows() {
                acc.push_row(r).expect("matching width");
            }
        }
    }
    dump
}

pub fn write_views(dump: &ViewDump, mut out: impl Write) -> std::io::Result<()> {
    let d = dump.h1.ncols();
    write!(out, "batch\trow\tuser")?;
    for name in ["h1", "h2", "z1", "z2"] {
        for j in 0..d {
            write!(out, "\t{name}_{j}")?;
        }
    }
    writeln!(out)?;
    for i in 0..dump.len() {
        write!(out, "{}\t{}\t{}", dump.batches[i], dump.rows[i], dump.users[i])?;
        for m in [&dump.h1, &dump.h2, &dump.z1, &dump.z2] {
            for v in m.row(i) {
                write!(out, "\t{v:?}")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_views(input: impl BufRead) -> Result<ViewDump> {
    let mut lines = input.lines();
    let header = lines.next().context("empty view dump")??;
    let cols = header.split('\t').count();
    if cols < 3 || (cols - 3) % 4 != 0 {
        bail!("malformed header with {cols} columns");
    }
    let d = (cols - 3) / 4;
    let mut dump = ViewDump {
        batches: Vec::new(),
        rows: Vec::new(),
        users: Vec::new(),
        h1: Tensor::zeros((0, d)),
        h2: Tensor::zeros((0, d)),
        z1: Tensor::zeros((0, d)),
        z2: Tensor::zeros((0, d)),
    };
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols {
            bail!("line {}: expected {cols} fields, found {}", i + 2, f.len());
        }
        dump.batches.push(f[0].parse().with_context(|| format!("line {}: batch", i + 2))?);
        dump.rows.push(f[1].parse().with_context(|| format!("line {}: row", i + 2))?);
        dump.users.push(f[2].to_owned());
        let vals: Vec<f64> = f[3..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("line {}: values", i + 2))?;
        for (k, m) in [&mut dump.h1, &mut dump.h2, &mut dump.z1, &mut dump.z2].into_iter().enumerate() {
            m.push_row(ndarray::ArrayView1::from(&vals[k * d..(k + 1) * d])).expect("matching width");
        }
    }
    Ok(dump)
}

/// Loads a checkpoint and writes the views of one split to `out`.
pub fn export_views(
    checkpoint: &std::path::Path,
    ds: &crate::experiments::Dataset,
    cfg: &crate::config::ExperimentConfig,
    out: &std::path::Path,
) -> Result<ViewDump> {
    let state = crate::experiments::load_checkpoint(checkpoint, ds)?;
    let mut examples = ds.split.part(cfg.export.split).to_vec();
    if let Some(limit) = cfg.export.limit {
        examples.truncate(limit);
    }
    let names: Vec<String> = ds.corpus.sequences.iter().map(|s| s.user.clone()).collect();
    let dump = compute_views(&state, &examples, &names, cfg.train.eval_batch_size, cfg.seeds[0]);
    let file = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = std::io::BufWriter::new(file);
    write_views(&dump, &mut w)?;
    w.flush()?;
    Ok(dump)
}
