//! Seeded random streams.
//!
//! A run owns one root seed. Every consumer (weight init, masking, data
//! shuffling, SGNS sampling, ...) derives its own independent stream from the
//! root seed and a fixed label, so changing how much randomness one component
//! draws never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `label`; the same (seed, label) always yields the same stream.
    pub fn child(&self, label: &str) -> SeedStream {
        SeedStream { seed: u64::from_le_bytes(self.digest(label)[..8].try_into().unwrap()) }
    }

    pub fn rng(&self, label: &str) -> Rng {
        ChaCha8Rng::from_seed(self.digest(label))
    }

    fn digest(&self, label: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(label.as_bytes());
        h.finalize().into()
    }
}
