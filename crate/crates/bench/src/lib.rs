//! Shared fixtures for the criterion benches.

use dualprec_core::dual::{DualModel, Trainer};
use dualprec_core::{QuantizedModel, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn weights(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.1f32..0.1)).collect()
}

/// A batch of standardized-looking MNIST-shaped inputs and labels.
pub fn batch(n: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * 784).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..10)).collect();
    (Tensor::new(vec![n, 1, 28, 28], x).unwrap(), y)
}

/// The default configuration: MLP-256, 2 shared bits.
pub fn trainer() -> Trainer {
    let cfg = TrainConfig::default();
    let model = DualModel::from_config(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    Trainer::with_model(&cfg, model)
}

pub fn snapshot() -> QuantizedModel {
    trainer().model().snapshot().unwrap()
}
