//! Synthetic two-class benchmarks.

use std::f64::consts::PI;

use crate::data::dataset::Dataset;
use crate::numeric::{Rng, Tensor};

/// Per-axis standard deviation of both Gaussian toy sets.
pub const TOY_STD: f64 = 2.236_067_977_499_79; // √5

/// Two isotropic 2-D Gaussian clusters, `n_per_class` samples each,
/// interleaved by class so that every prefix is balanced.
pub fn gaussian_pair(
    n_per_class: usize,
    mean0: [f64; 2],
    mean1: [f64; 2],
    std: f64,
    seed: u64,
) -> Dataset {
    assert!(n_per_class >= 1, "n_per_class must be positive");
    let mut rng = Rng::seed_from(seed);
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for (label, mean) in [(0, mean0), (1, mean1)] {
            data.push(mean[0] + std * rng.normal());
            data.push(mean[1] + std * rng.normal());
            labels.push(label);
        }
    }
    let n = labels.len();
    let features = Tensor::new(&[n, 2], data).expect("consistent shape");
    Dataset::new(features, labels, 2, (0..n as u64).collect()).expect("valid toy data")
}

/// Clusters at (−5, −5) and (5, 5) with per-axis std √5.
pub fn gen_toy1(n_per_class: usize, seed: u64) -> Dataset {
    gaussian_pair(n_per_class, [-5.0, -5.0], [5.0, 5.0], TOY_STD, seed)
}

/// Same generator as [`gen_toy1`] with means at ±(2, 2), so the classes overlap.
pub fn gen_toy2(n_per_class: usize, seed: u64) -> Dataset {
    gaussian_pair(n_per_class, [-2.0, -2.0], [2.0, 2.0], TOY_STD, seed)
}

/// Interleaved half circles. The upper moon is centred at the origin, the
/// lower one at (1, 0.5); both have unit radius before jitter.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Dataset {
    assert!(n >= 2, "two moons needs at least two points");
    assert!(noise_std >= 0.0, "noise must be non-negative");
    let mut rng = Rng::seed_from(seed);
    let n_outer = n.div_ceil(2);
    let n_inner = n - n_outer;
    let angle = |i: usize, m: usize| {
        if m > 1 {
            PI * i as f64 / (m - 1) as f64
        } else {
            0.0
        }
    };
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer.max(n_inner) {
        if i < n_outer {
            let t = angle(i, n_outer);
            data.push(t.cos() + noise_std * rng.normal());
            data.push(t.sin() + noise_std * rng.normal());
            labels.push(0);
        }
        if i < n_inner {
            let t = angle(i, n_inner);
            data.push(1.0 - t.cos() + noise_std * rng.normal());
            data.push(0.5 - t.sin() + noise_std * rng.normal());
            labels.push(1);
        }
    }
    let features = Tensor::new(&[n, 2], data).expect("consistent shape");
    Dataset::new(features, labels, 2, (0..n as u64).collect()).expect("valid moons")
}

/// `size × size` grayscale images: class 0 carries one bright horizontal
/// bar, class 1 one vertical bar, both at a random offset over uniform
/// background noise in `[0, 0.3)`.
pub fn gen_bars(n_per_class: usize, size: usize, seed: u64) -> Dataset {
    assert!(n_per_class >= 1, "n_per_class must be positive");
    assert!(size >= 2, "images need at least 2 pixels per side");
    let mut rng = Rng::seed_from(seed);
    let mut data = Vec::with_capacity(2 * n_per_class * size * size);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for label in 0..2 {
            let at = rng.below(size);
            for r in 0..size {
                for c in 0..size {
                    let on = if label == 0 { r == at } else { c == at };
                    data.push(if on { 1.0 } else { 0.3 * rng.uniform() });
                }
            }
            labels.push(label);
        }
    }
    let n = labels.len();
    let features = Tensor::new(&[n, size, size, 1], data).expect("consistent shape");
    Dataset::with_class_names(
        features,
        labels,
        2,
        (0..n as u64).collect(),
        vec!["horizontal".into(), "vertical".into()],
    )
    .expect("valid bars")
}
