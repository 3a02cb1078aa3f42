//! Seeded synthetic fixtures: block-structured labelled images.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sample::{ImageSample, LabelMap};
use crate::tensor::Tensor;

pub const BLOCK: usize = 16;

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.20, 0.15],
    [0.15, 0.65, 0.20],
    [0.15, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.60, 0.25, 0.70],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.45, 0.45, 0.45],
];

/// Base color of class `c`.
pub fn class_color(c: usize) -> [f64; 3] {
    PALETTE[c % PALETTE.len()]
}

/// A `size x size` image tiled with `BLOCK`-sized squares, each filled with
/// its class color plus uniform per-pixel noise of amplitude `noise`. Class
/// counts over blocks are balanced, so every class appears when there are
/// at least `classes` blocks.
pub fn sample(seed: u64, size: usize, classes: usize, noise: f64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = size / BLOCK;
    let mut blocks: Vec<usize> = (0..nb * nb).map(|i| i % classes).collect();
    blocks.shuffle(&mut rng);
    let label = LabelMap::from_fn(size, size, |y, x| blocks[(y / BLOCK) * nb + x / BLOCK] as i64);
    let jitter: Vec<f64> = (0..size * size * 3)
        .map(|_| rng.random_range(-1.0..=1.0) * noise)
        .collect();
    let image = Tensor::from_fn(&[size, size, 3], |i| {
        let c = label.at(i[0], i[1]) as usize;
        (class_color(c)[i[2]] + jitter[(i[0] * size + i[1]) * 3 + i[2]]).clamp(0.0, 1.0)
    });
    ImageSample::new(image, Some(label)).expect("consistent fixture shapes")
}

pub fn dataset(seed: u64, count: usize, size: usize, classes: usize, noise: f64) -> Vec<ImageSample> {
    (0..count)
        .map(|i| sample(seed.wrapping_mul(1000).wrapping_add(i as u64), size, classes, noise))
        .collect()
}

/// Uniform random pixels, no label.
pub fn random_image(seed: u64, size: usize) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn(&[size, size, 3], |_| rng.random_range(0.0..1.0));
    ImageSample::new(image, None).expect("rgb shape")
}

/// Random colors constant over each `patch x patch` cell, no label.
pub fn patch_constant_image(seed: u64, size: usize, patch: usize) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size / patch;
    let colors: Vec<f64> = (0..n * n * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let image = Tensor::from_fn(&[size, size, 3], |i| {
        colors[((i[0] / patch) * n + i[1] / patch) * 3 + i[2]]
    });
    ImageSample::new(image, None).expect("rgb shape")
}
