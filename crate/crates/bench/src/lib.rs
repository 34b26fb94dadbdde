//! Shared fixtures for the benchmarks.

use difar_core::synth::{generate, SynthConfig, SynthDataset};
use difar_core::EmbeddingVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n` isotropic Gaussian vectors of dimension `d`.
pub fn gaussian_vectors(n: usize, d: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| EmbeddingVector((0..d).map(|_| StandardNormal.sample(&mut rng)).collect()))
        .collect()
}

/// The default synthetic benchmark.
pub fn synthetic() -> SynthDataset {
    generate(&SynthConfig::default()).expect("default synth config is feasible")
}
