//! Deterministic seed derivation and dropout mask streams.
//!
//! Every random draw in the system flows through a ChaCha12 generator seeded
//! by mixing a root seed with a domain tag and context words, so any piece
//! of the pipeline can be re-run in isolation and reproduce its stream.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good avalanche for combining seed words.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed, a domain tag and context words.
pub fn derive_seed(root: u64, domain: &str, parts: &[u64]) -> u64 {
    let mut h = mix(root);
    for b in domain.bytes() {
        h = mix(h ^ b as u64);
    }
    for &p in parts {
        h = mix(h ^ p);
    }
    h
}

pub fn rng_from(root: u64, domain: &str, parts: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, domain, parts))
}

/// Per-call dropout stream keyed by (seed, step); each `next_mask` call
/// advances a site counter so every dropout site in a forward pass gets
/// its own reproducible mask.
pub struct DropoutStream {
    seed: u64,
    step: u64,
    site: u64,
}

impl DropoutStream {
    pub fn new(seed: u64, step: u64) -> Self {
        DropoutStream { seed, step, site: 0 }
    }

    /// Everything kept: evaluation mode or p = 0.
    pub fn disabled() -> Self {
        DropoutStream {
            seed: 0,
            step: 0,
            site: u64::MAX,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.site == u64::MAX
    }

    pub fn next_mask(&mut self, len: usize, p: f64) -> Arc<Vec<bool>> {
        if self.is_disabled() {
            return Arc::new(vec![true; len]);
        }
        let mut rng = rng_from(self.seed, "dropout", &[self.step, self.site]);
        self.site += 1;
        Arc::new((0..len).map(|_| rng.gen::<f64>() >= p).collect())
    }
}
