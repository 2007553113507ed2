//! Seeded synthetic datasets. Every sample is a pure function of the
//! seed, so identical flags reproduce identical runs byte for byte.

use fitcore::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Points in the linear regression set.
pub const LINREG_POINTS: usize = 256;
/// Standard deviation of the regression noise (variance 1e-2).
pub const LINREG_NOISE_STD: f64 = 0.1;
/// Points per class in the SVM blobs.
pub const SVM_PER_CLASS: usize = 128;
/// Blob standard deviation; centers sit 6 sigma apart.
pub const SVM_SIGMA: f64 = 0.5;
/// Points drawn from the ring mixture per epoch.
pub const GAN_POINTS: usize = 512;
/// Standard deviation of each mixture mode.
pub const GAN_SIGMA: f64 = 0.05;

fn data_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `y = 2x + 1 + eps`, `eps ~ N(0, 0.01)`, `x ~ U(-1, 1)`.
pub fn linreg_points(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = data_rng(seed);
    (0..LINREG_POINTS)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * LINREG_NOISE_STD;
            (x, 2.0 * x + 1.0 + eps)
        })
        .collect()
}

pub fn linreg_batches(seed: u64, batch_size: usize) -> VecGenerator {
    let points = linreg_points(seed);
    let batches = points
        .chunks(batch_size)
        .map(|chunk| {
            let n = chunk.len();
            let xs: Vec<f64> = chunk.iter().map(|(x, _)| *x).collect();
            let ys: Vec<f64> = chunk.iter().map(|(_, y)| *y).collect();
            Batch::supervised(
                Tensor::from_vec(xs, [n, 1], false).unwrap(),
                Tensor::from_vec(ys, [n, 1], false).unwrap(),
            )
        })
        .collect();
    VecGenerator::new(batches)
}

/// Two 2-D Gaussian blobs centered at (-1.5, 0) and (+1.5, 0) with
/// sigma 0.5, interleaved, labeled -1 and +1. Deviations along the
/// separating axis are truncated at 2.5 sigma, so no point ever crosses
/// x = 0 and the classes are separable by construction.
pub fn svm_points(seed: u64) -> Vec<([f64; 2], f64)> {
    let mut rng = data_rng(seed);
    let truncated_normal = |rng: &mut ChaCha8Rng| -> f64 {
        loop {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() < 2.5 {
                return v;
            }
        }
    };
    let mut points = Vec::with_capacity(2 * SVM_PER_CLASS);
    for _ in 0..SVM_PER_CLASS {
        for (center, label) in [(-1.5, -1.0), (1.5, 1.0)] {
            let dx = truncated_normal(&mut rng) * SVM_SIGMA;
            let dy: f64 = rng.sample::<f64, _>(StandardNormal) * SVM_SIGMA;
            points.push(([center + dx, dy], label));
        }
    }
    points
}

pub fn svm_batches(seed: u64, batch_size: usize) -> VecGenerator {
    let points = svm_points(seed);
    let batches = points
        .chunks(batch_size)
        .map(|chunk| {
            let n = chunk.len();
            let xs: Vec<f64> = chunk.iter().flat_map(|(p, _)| *p).collect();
            let ys: Vec<f64> = chunk.iter().map(|(_, l)| *l).collect();
            Batch::supervised(
                Tensor::from_vec(xs, [n, 2], false).unwrap(),
                Tensor::from_vec(ys, [n, 1], false).unwrap(),
            )
        })
        .collect();
    VecGenerator::new(batches)
}

/// Mode centers equally spaced on the unit circle.
pub fn ring_modes(modes: usize) -> Vec<[f64; 2]> {
    (0..modes)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / modes as f64;
            [angle.cos(), angle.sin()]
        })
        .collect()
}

/// Samples from a mixture of `modes` Gaussians (sigma 0.05) on the unit
/// circle; unsupervised.
pub fn ring_points(seed: u64, modes: usize) -> Vec<[f64; 2]> {
    let centers = ring_modes(modes);
    let mut rng = data_rng(seed);
    (0..GAN_POINTS)
        .map(|_| {
            let c = centers[rng.random_range(0..centers.len())];
            let dx: f64 = rng.sample::<f64, _>(StandardNormal) * GAN_SIGMA;
            let dy: f64 = rng.sample::<f64, _>(StandardNormal) * GAN_SIGMA;
            [c[0] + dx, c[1] + dy]
        })
        .collect()
}

pub fn ring_batches(seed: u64, modes: usize, batch_size: usize) -> VecGenerator {
    let points = ring_points(seed, modes);
    let batches = points
        .chunks(batch_size)
        .map(|chunk| {
            let n = chunk.len();
            let xs: Vec<f64> = chunk.iter().flat_map(|p| *p).collect();
            Batch::unsupervised(Tensor::from_vec(xs, [n, 2], false).unwrap())
        })
        .collect();
    VecGenerator::new(batches)
}
