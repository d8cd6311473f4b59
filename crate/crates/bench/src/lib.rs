//! Shared fixtures for the criterion benchmarks.

use epl_core::evidence::{mass_from_evidence, MassField};
use epl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use epl_core;

/// Random non-negative evidence volume.
pub fn random_evidence(classes: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..classes * side * side * side)
        .map(|_| rng.gen_range(0.0..4.0))
        .collect();
    Tensor::from_vec(data, &[classes, side, side, side]).expect("shape")
}

pub fn random_mass_field(classes: usize, side: usize, seed: u64) -> MassField {
    mass_from_evidence(&random_evidence(classes, side, seed)).expect("valid evidence")
}
