//! Shared fixtures for the benchmarks in `benches/`.

use partwhole::synth::{generate_dataset, SceneConfig, SyntheticScene};
use partwhole::trainer::TrainConfig;
use partwhole::Matrix;

/// Desk-scale training setup: 8×8 grid, 3 classes, 32-wide features.
pub fn desk_config() -> TrainConfig {
    TrainConfig::default()
}

pub fn desk_scenes(count: usize) -> Vec<SyntheticScene> {
    generate_dataset(&SceneConfig::default(), 1, count).expect("default scene config is valid")
}

/// Deterministic pseudo-random score table in [0, 1).
pub fn score_table(rows: usize, cols: usize, salt: u64) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| {
        let mut z = (i as u64 * 7919 + j as u64 * 104_729 + salt).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z ^= z >> 29;
        (z >> 11) as f64 / (1u64 << 53) as f64
    })
}
