//! Deterministic parameter initializers.
//!
//! Each parameter draws from its own stream keyed by `(seed, key)`, so the
//! values of a parameter do not depend on which other parameters a model
//! variant happens to create.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Tensor;

pub fn stream(seed: u64, key: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

pub fn xavier_uniform(seed: u64, key: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let mut rng = stream(seed, key);
    let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

/// `N(0, std²)` rows; row 0 of every slice of `rows_per_slice` rows is zero.
pub fn embedding_normal(seed: u64, key: &str, rows: usize, width: usize, rows_per_slice: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut rng = stream(seed, key);
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for _ in 0..width {
            let v = dist.sample(&mut rng);
            data.push(if r % rows_per_slice == 0 { 0.0 } else { v });
        }
    }
    Tensor::new(vec![rows, width], data).expect("embedding shape")
}

pub fn identity(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::new(vec![n, n], data).expect("square")
}
