//! Shared fixtures for the benchmarks.

use ilr_core::{Batch, ModelConfig, ModelParams, PositionalMode};

/// Desk-scale model with a deterministic random batch of `batch_size` rows.
pub fn desk_fixture(pos_mode: PositionalMode, batch_size: usize) -> (ModelParams<f32>, Batch) {
    let cfg = ModelConfig::desk_small(pos_mode);
    let params = ModelParams::init(&cfg, 0).expect("valid preset");
    let t = cfg.max_seq_len;
    let n = batch_size * t;
    let inputs: Vec<usize> = (0..n).map(|i| (i * 7919 + 13) % 256).collect();
    let targets: Vec<usize> = (0..n).map(|i| (i * 104_729 + 5) % 256).collect();
    (params, Batch::new(inputs, targets, t).expect("whole rows"))
}
