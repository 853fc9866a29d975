//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cstn::data::{generate, DatasetSpec};
use cstn::pyramid::ModelConfig;
use cstn::{TrainConfig, WeakSample};

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// The desk-scale model used by the acceptance runs, on a small batch.
pub fn desk_config(batch: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        widths: [8, 16, 32, 32],
        fpn_channels: 32,
        loc_hidden: 16,
        ..ModelConfig::default()
    };
    cfg.data = DatasetSpec {
        train_count: batch,
        val_count: 0,
        ..DatasetSpec::default()
    };
    cfg.train.batch_size = batch;
    cfg
}

pub fn samples(cfg: &TrainConfig) -> Vec<WeakSample> {
    generate(&cfg.data).expect("valid spec").train
}
