#![allow(dead_code)]

use mfcast::dataio::FeatureDescriptor;
use mfcast::linalg::Matrix;
use mfcast::training::TrainConfig;
use mfcast::{Dataset, MissingPattern};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `m` maskable measurement features followed by a bias column.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Dataset {
    let p = m + 1;
    let mut x = Matrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    for r in 0..n {
        for j in 0..m {
            x.set(r, j, rng.random_range(-1.0..1.0));
        }
        x.set(r, m, 1.0);
        y.push(rng.random_range(-1.0..1.0));
    }
    let mut descriptors: Vec<FeatureDescriptor> = (0..m).map(|s| FeatureDescriptor::measurement(s, 0)).collect();
    descriptors.push(FeatureDescriptor::bias());
    Dataset {
        x,
        y,
        descriptors,
        maskable: (0..m).collect(),
        horizon: 1,
        max_lag: 0,
        obs_periods: (0..n).collect(),
        target_plant: 0,
    }
}

/// Linear targets `w . x + 0.5` plus uniform noise.
pub fn planted_dataset(rng: &mut ChaCha8Rng, n: usize, weights: &[f64], noise: f64) -> Dataset {
    let mut ds = random_dataset(rng, n, weights.len());
    for r in 0..n {
        let signal: f64 = ds.x.row(r).iter().zip(weights).map(|(a, w)| a * w).sum();
        ds.y[r] = signal + 0.5 + noise * rng.random_range(-1.0..1.0);
    }
    ds
}

pub fn random_pattern(rng: &mut ChaCha8Rng, p: usize, maskable: &[usize]) -> MissingPattern {
    let mut a = MissingPattern::zeros(p);
    for &j in maskable {
        if rng.random_bool(0.3) {
            a.set(j, true);
        }
    }
    a
}

pub fn small_cfg(seed: u64, max_iters: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.02,
        max_iters,
        patience: 10,
        batch_size: 32,
        weight_decay: 1e-5,
        seed,
        shuffle: false,
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
