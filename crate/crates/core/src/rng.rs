//! Seeded randomness helpers. Everything that draws randomness takes a
//! ChaCha8 stream so runs are bit-reproducible from a u64 seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One draw from N(0, std^2) via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal(rng, std)).collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_streams_are_reproducible() {
        let a = normal_tensor(&mut seeded(7), vec![4, 4], 0.02);
        let b = normal_tensor(&mut seeded(7), vec![4, 4], 0.02);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = seeded(11);
        let n = 20000;
        let xs: Vec<f64> = (0..n).map(|_| normal(&mut rng, 1.0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
