//! Deterministic RNG streams.
//!
//! Every stochastic component draws from a ChaCha stream derived from the
//! run seed plus a stable label, so parallel or reordered work cannot
//! change results and reruns with the same seed are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// Derive an independent stream from a base seed and a list of stream ids
/// (e.g. `[epoch, sample_index]`).
pub fn derive(seed: u64, ids: &[u64]) -> Rng {
    let mut state = [0u8; 32];
    state[..8].copy_from_slice(&seed.to_le_bytes());
    for (slot, id) in ids.iter().enumerate() {
        let mixed = id.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17) ^ (slot as u64 + 1);
        let at = 8 + (slot % 3) * 8;
        for (i, b) in mixed.to_le_bytes().iter().enumerate() {
            state[at + i] ^= b;
        }
    }
    ChaCha12Rng::from_seed(state)
}

pub fn from_seed(seed: u64) -> Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
