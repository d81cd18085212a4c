#![allow(dead_code)]

use elastic_ard::dynet::{SearchSpace, StageSpec, StemSpec};
use elastic_ard::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two small conv stages with every dimension elastic.
pub fn conv_space() -> SearchSpace {
    SearchSpace {
        input: [3, 6, 6],
        classes: 4,
        stem: StemSpec { channels: 4, kernel: 3 },
        stages: vec![
            StageSpec {
                channels: 6,
                stride: 1,
                max_depth: 3,
                depth_choices: vec![1, 2, 3],
                width_choices: vec![0.5, 0.75, 1.0],
                expansion_choices: vec![0.5, 1.0],
                kernel_choices: Some(vec![1, 3, 5]),
                kernel: 3,
            },
            StageSpec {
                channels: 8,
                stride: 2,
                max_depth: 2,
                depth_choices: vec![1, 2],
                width_choices: vec![0.5, 1.0],
                expansion_choices: vec![0.25, 0.5],
                kernel_choices: None,
                kernel: 3,
            },
        ],
    }
}

/// A tiny space whose configurations can be listed exhaustively.
pub fn tiny_space() -> SearchSpace {
    SearchSpace {
        input: [2, 1, 1],
        classes: 3,
        stem: StemSpec { channels: 3, kernel: 1 },
        stages: vec![
            StageSpec {
                channels: 4,
                stride: 1,
                max_depth: 2,
                depth_choices: vec![1, 2],
                width_choices: vec![0.5, 1.0],
                expansion_choices: vec![0.5, 1.0],
                kernel_choices: None,
                kernel: 1,
            },
            StageSpec {
                channels: 2,
                stride: 1,
                max_depth: 2,
                depth_choices: vec![2],
                width_choices: vec![0.5, 1.0],
                expansion_choices: vec![1.0],
                kernel_choices: None,
                kernel: 1,
            },
        ],
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_batch(space: &SearchSpace, batch: usize, seed: u64) -> Array {
    let mut r = rng(seed);
    let [c, h, w] = space.input;
    let data = (0..batch * c * h * w).map(|_| r.random::<f64>()).collect();
    Array::new(vec![batch, c, h, w], data).unwrap()
}
