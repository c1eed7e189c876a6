//! Shared fixtures for the benchmarks.

use flame_core::backbone::NetworkParams;
use flame_core::data::synthetic::MarkovConfig;
use flame_core::data::{build_sequences, SequenceDataset};
use flame_core::ensemble::EnsembleState;
use flame_core::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The small synthetic workload used for end-to-end measurements.
pub fn dataset(users: usize, max_len: usize) -> SequenceDataset {
    let cfg = MarkovConfig {
        num_users: users,
        ..MarkovConfig::default()
    };
    build_sequences(&cfg.log(1), 5, max_len).expect("synthetic dataset builds")
}

pub fn config(max_len: usize) -> TrainConfig {
    TrainConfig {
        dim: 32,
        layers: 2,
        heads: 2,
        max_len,
        dropout: 0.2,
        batch_size: 128,
        ..TrainConfig::default()
    }
}

pub fn network(cfg: &TrainConfig, num_items: usize, seed: u64) -> NetworkParams<f32> {
    NetworkParams::init(
        &cfg.model_hyper(num_items),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .expect("valid hyperparameters")
}

pub fn ensemble(cfg: &TrainConfig, num_items: usize) -> EnsembleState<f32> {
    EnsembleState::new(
        network(cfg, num_items, 1),
        network(cfg, num_items, 2),
        cfg.submodules,
    )
    .expect("matching architectures")
}
