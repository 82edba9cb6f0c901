//! Shared fixtures for the inference benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnjet_core::embedding::{EmbeddedJet, Layout};

/// Jets with uniform site values in `[-1, 1)`.
pub fn random_jets(n_jets: usize, n_sites: usize, d: usize, seed: u64) -> Vec<EmbeddedJet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_jets)
        .map(|_| EmbeddedJet {
            sites: (0..n_sites).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            layout: Layout::PerParticle,
        })
        .collect()
}
