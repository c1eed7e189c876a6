//! Log text to trained, saved, reloaded and evaluated model.

use flame_core::data::synthetic::MarkovConfig;
use flame_core::data::{build_sequences, load_dataset, parse_interactions, save_dataset, Split};
use flame_core::ensemble::EnsembleState;
use flame_core::evaluation::{evaluate_network, evaluate_paths, popularity_report, EvalOptions};
use flame_core::training::{pretrain_frozen, train_flame, Checkpoint, Mode, TrainConfig};
use flame_core::Error;

fn config() -> TrainConfig {
    TrainConfig {
        mode: Mode::Flame,
        dim: 8,
        layers: 2,
        heads: 2,
        max_len: 6,
        dropout: 0.1,
        batch_size: 16,
        epochs: 3,
        patience: 3,
        lr: 5e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn end_to_end_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let markov = MarkovConfig {
        num_items: 25,
        num_users: 50,
        min_len: 7,
        max_len: 12,
        ..MarkovConfig::default()
    };
    let log = parse_interactions(markov.tsv(2).as_bytes()).unwrap();
    let ds = build_sequences(&log, 3, 6).unwrap();
    let cache = dir.path().join("ds.bin");
    save_dataset(&ds, &cache).unwrap();
    let ds = load_dataset(&cache).unwrap();

    let cfg = config();
    let frozen = pretrain_frozen(&cfg, &ds).unwrap().best;
    let out = train_flame(&cfg, &ds, &frozen).unwrap();
    let path = dir.path().join("model.ckpt");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert!(loaded.params.bits_eq(&out.best.params));
    assert_eq!(loaded.meta, out.best.meta);

    let opts = EvalOptions::default();
    let valid = evaluate_network(&loaded.params, &ds, Split::Valid, &opts).unwrap();
    assert_eq!(valid.ndcg(20).unwrap(), out.best.meta.best_val_ndcg20);
    assert_eq!(valid.count(), ds.num_users());

    let state =
        EnsembleState::new(frozen.params.clone(), loaded.params.clone(), cfg.submodules).unwrap();
    let paths = evaluate_paths(&state, &ds, Split::Test, &opts).unwrap();
    let test = evaluate_network(&loaded.params, &ds, Split::Test, &opts).unwrap();
    let frozen_test = evaluate_network(&frozen.params, &ds, Split::Test, &opts).unwrap();
    assert_eq!(paths.reports[0].ranks, frozen_test.ranks);
    assert_eq!(paths.reports.last().unwrap().ranks, test.ranks);
    for (i, row) in paths.per.iter().enumerate() {
        assert!(row[i].is_none_or(|v| v == 0.0));
    }

    let pop = popularity_report(&ds, Split::Test, &opts).unwrap();
    assert_eq!(pop.count(), ds.num_users());
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let log = parse_interactions(
        MarkovConfig {
            num_users: 30,
            num_items: 20,
            min_len: 7,
            max_len: 9,
            ..MarkovConfig::default()
        }
        .tsv(1)
        .as_bytes(),
    )
    .unwrap();
    let ds = build_sequences(&log, 2, 6).unwrap();
    let frozen = pretrain_frozen(
        &TrainConfig {
            epochs: 1,
            patience: 1,
            ..config()
        },
        &ds,
    )
    .unwrap()
    .best;
    let path = dir.path().join("f.ckpt");
    frozen.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::Format(_))
    ));
    let wider = TrainConfig {
        dim: 12,
        ..config()
    };
    assert!(matches!(
        train_flame(&wider, &ds, &frozen),
        Err(Error::Config(_))
    ));
}
