//! Shared fixtures for the kernel benchmarks.

use ecvae::data::MixtureSpec;
use ecvae::trainer::{ModelBundle, TrainConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Toy-scale model at the default (4 × 256) widths.
pub fn toy_bundle() -> (TrainConfig, ModelBundle) {
    let cfg = TrainConfig::default();
    let bundle = ModelBundle::new(&cfg, 2, None).expect("default config is valid");
    (cfg, bundle)
}

pub fn toy_batch(n: usize, seed: u64) -> Array2<f64> {
    MixtureSpec::default_grid()
        .sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
        .0
}
