//! Shared fixtures for the criterion benchmarks.

use kpanim_core::trainer::TrainConfig;
use kpanim_core::Tensor;

/// Deterministic pseudo-image batch [n,3,size,size] with values in [0, 1].
pub fn image_batch(n: usize, size: usize, salt: usize) -> Tensor {
    Tensor::from_fn(&[n, 3, size, size], |i| ((i * 31 + salt * 17) % 97) as f64 / 96.0)
}

/// Narrow network used to time a full training step.
pub fn small_config(k: usize) -> TrainConfig {
    TrainConfig {
        k,
        base_channels: 8,
        max_channels: 64,
        disc_base: 8,
        disc_max: 64,
        ..TrainConfig::default()
    }
}
