//! Helpers shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ParameterSet, Tensor};

/// Replaces every parameter with N(0, std²) draws so that no gradient is
/// trivially zero.
pub fn randomized(params: &ParameterSet, seed: u64, std: f64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let mut out = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let shape = params.value(&name).unwrap().shape().to_vec();
        let len = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(&mut rng)).collect();
        out.set_value(&name, Tensor::new(shape, data).unwrap()).unwrap();
    }
    out
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
