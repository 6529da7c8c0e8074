//! Counter-based per-site random streams.
//!
//! A stream is a ChaCha8 key derived from `SHA-256(experiment-id, seed)`,
//! one ChaCha stream id per variable, and one 64-bit word pair per site, so a
//! site value never depends on how many other sites were drawn before it.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream ids of the per-site variables.
pub const STREAM_B: u64 = 0;
pub const STREAM_A: u64 = 1;
/// First stream id free for auxiliary uses.
pub const STREAM_AUX: u64 = 16;

pub fn stream_key(experiment_id: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((experiment_id.len() as u64).to_le_bytes());
    h.update(experiment_id.as_bytes());
    h.update(seed.to_le_bytes());
    let out = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&out);
    key
}

#[derive(Clone)]
pub struct SiteStream {
    rng: ChaCha8Rng,
}

impl SiteStream {
    pub fn new(experiment_id: &str, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(stream_key(experiment_id, seed));
        rng.set_stream(stream);
        SiteStream { rng }
    }

    /// The 64-bit word belonging to `site`.
    pub fn word(&mut self, site: u64) -> u64 {
        self.rng.set_word_pos(2 * site as u128);
        self.rng.next_u64()
    }

    /// Words for `sites first..first+count`, identical to calling [`word`]
    /// site by site.
    ///
    /// [`word`]: SiteStream::word
    pub fn words(&mut self, first: u64, count: usize) -> Vec<u64> {
        self.rng.set_word_pos(2 * first as u128);
        (0..count).map(|_| self.rng.next_u64()).collect()
    }
}

/// Uniform in `[0, 1)` from the top 53 bits.
pub fn unit_interval(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in `(0, 1)`, never exactly zero.
pub fn open_unit_interval(word: u64) -> f64 {
    ((word >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}
