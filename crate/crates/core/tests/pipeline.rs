use std::io::Cursor;
use std::path::Path;

use mclrec_core::checkpoint::Checkpoint;
use mclrec_core::corpus::{parse_corpus, split_leave_one_out, Corpus};
use mclrec_core::encoder::ModelConfig;
use mclrec_core::evaluation::DEFAULT_KS;
use mclrec_core::trainer::{fit, Schedule, TrainConfig, Variant};
use rand::Rng;

/// Sixty users walking a ring of 12 items, plus a user and an item that the
/// 5-core filter must drop.
fn corpus() -> Corpus {
    let mut r = mclrec_core::rng::stream(3, &[0]);
    let mut text = String::new();
    for u in 0..60 {
        let mut at = r.gen_range(0..12);
        let len = r.gen_range(6..12);
        text.push_str(&format!("u{u}"));
        for _ in 0..len {
            text.push_str(&format!(" i{at}"));
            at = (at + 1 + (r.gen::<f64>() < 0.2) as usize) % 12;
        }
        text.push('\n');
    }
    text.push_str("short i0 i1 i2\n");
    text.push_str("u60 i0 i1 i2 i3 rare\n");
    parse_corpus(Cursor::new(text), Path::new("ring.txt"), 5).unwrap()
}

fn config(variant: Variant) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 3,
        lr_theta: 5e-3,
        lr_phi: 5e-3,
        variant,
        seed: 11,
        model: ModelConfig {
            hidden: 16,
            max_len: 8,
            blocks: 1,
            heads: 2,
            dropout: 0.1,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn filtering_drops_sparse_users_and_items() {
    let c = corpus();
    assert_eq!(c.vocab.size(), 12);
    assert!(c.sequences.iter().all(|s| s.user != "short" && s.len() >= 5));
}

#[test]
fn every_variant_trains_and_checkpoints_round_trip() {
    let c = corpus();
    let split = split_leave_one_out(&c.sequences).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        for schedule in [Schedule::PerBatch, Schedule::PerEpoch] {
            let cfg = TrainConfig { schedule, ..config(variant) };
            let out = fit(&split, c.vocab.size(), &cfg, &mut ()).unwrap();
            assert_eq!(out.report.epochs.len(), 3);
            let metrics = out.state.evaluate(&split.test, &DEFAULT_KS, 64).unwrap();
            assert_eq!(metrics.n_users, split.test.len());

            let path = dir.path().join(format!("{variant}-{schedule:?}.json"));
            Checkpoint::from_state(&out.state, &cfg).save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap().into_state().unwrap();
            assert_eq!(back.evaluate(&split.test, &DEFAULT_KS, 64).unwrap(), metrics);
        }
    }
}

#[test]
fn a_trained_model_beats_random_ranking() {
    let c = corpus();
    let split = split_leave_one_out(&c.sequences).unwrap();
    let cfg = TrainConfig { epochs: 20, ..config(Variant::Full) };
    let out = fit(&split, c.vocab.size(), &cfg, &mut ()).unwrap();
    let m = out.state.evaluate(&split.test, &[1, 5], 64).unwrap();
    // Random ranking over 12 items gives HR@5 = 5/12.
    assert!(m.hr_at(5) > 2.0 * 5.0 / 12.0, "{m:?}");
}
