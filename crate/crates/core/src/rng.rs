//! Seeded random stream shared by initialization, noise, crops and flips.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// A reproducible random stream whose position can be saved and restored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicRng {
    inner: ChaCha8Rng,
    seed: u64,
}

/// Serializable position of a [`DeterministicRng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position in the ChaCha stream, as a decimal string (u128 does
    /// not survive JSON numbers).
    pub word_pos: String,
}

/// Starts the single random stream used by a run.
pub fn seed_all(seed: u64) -> DeterministicRng {
    DeterministicRng {
        inner: ChaCha8Rng::seed_from_u64(seed),
        seed,
    }
}

impl DeterministicRng {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Option<Self> {
        let pos: u128 = state.word_pos.parse().ok()?;
        let mut rng = seed_all(state.seed);
        rng.inner.set_word_pos(pos);
        Some(rng)
    }

    /// An independent stream derived from this one's seed and a label.
    pub fn fork(&self, label: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(label);
        Self { inner, seed: self.seed }
    }
}

impl RngCore for DeterministicRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
