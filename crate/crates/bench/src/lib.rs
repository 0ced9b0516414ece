//! Seeded inputs shared by the benchmarks.

use dynalign::features::RawWindow;
use dynalign::net::{ModelParams, NetShape};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn model(input_dim: usize, classes: usize, seed: u64) -> ModelParams {
    ModelParams::init(
        NetShape::new(input_dim, classes),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// `channels` channels of uniform noise, `seconds` long at 200 Hz.
pub fn noise_window(channels: usize, seconds: usize, seed: u64) -> RawWindow {
    RawWindow::new(uniform_matrix(channels, seconds * 200, seed), 200.0).expect("valid window")
}
