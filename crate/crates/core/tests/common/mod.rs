#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uddml::Dataset;

/// Birth-records-like synthetic data: ten correlated covariates (two of them
/// binary), a rare treatment (about 4% treated) and a small negative,
/// heterogeneous effect on a standardized outcome.
pub fn natality_like(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 10));
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        let f: f64 = rng.sample(StandardNormal);
        for d in 0..8 {
            let e: f64 = rng.sample(StandardNormal);
            x[[i, d]] = 0.6 * f + 0.8 * e;
        }
        x[[i, 8]] = f64::from(u8::from(rng.random::<f64>() < 0.3));
        x[[i, 9]] = f64::from(u8::from(rng.random::<f64>() < 0.5 + 0.2 * f.tanh()));
        let logit = -3.6 + 0.6 * x[[i, 0]] - 0.4 * x[[i, 1]] + 0.8 * x[[i, 8]];
        let t = u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp()));
        let effect = -0.2 * (1.0 + 0.3 * x[[i, 2]]);
        let noise: f64 = rng.sample(StandardNormal);
        y.push(0.4 * x[[i, 0]] + 0.3 * x[[i, 1]].sin() + 0.2 * x[[i, 3]] * x[[i, 4]] - 0.3 * x[[i, 9]] + f64::from(t) * effect + noise);
        w.push(t);
    }
    Dataset::new(y, w, x).expect("valid synthetic data")
}
