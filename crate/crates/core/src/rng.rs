//! Deterministic random streams.
//!
//! Every random draw in training and inference comes from a ChaCha stream
//! keyed by the run seed plus a short tag path (purpose, step, item, ...).
//! A stream's output therefore never depends on how many draws other
//! consumers made, which keeps runs reproducible across padding changes,
//! resumes and worker counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub mod tag {
    pub const EPOCH_PLAN: u64 = 1;
    pub const REFERENCE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const LATENT_NOISE: u64 = 4;
    pub const PRIOR_NOISE: u64 = 5;
    pub const SEGMENT: u64 = 6;
    pub const INIT: u64 = 8;
    pub const INFERENCE: u64 = 9;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `seed` refined by the tag path.
pub fn derive(seed: u64, path: &[u64]) -> Stream {
    let mut words = [splitmix(seed); 4];
    for (i, &t) in path.iter().enumerate() {
        let slot = i % 4;
        words[slot] = splitmix(words[slot] ^ splitmix(t.wrapping_add(i as u64 * 0x1000_0000_01B3)));
        words[(slot + 1) % 4] ^= splitmix(words[slot]);
    }
    let mut bytes = [0u8; 32];
    for (chunk, w) in bytes.chunks_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// FNV-1a; used to key parameter initialisation by name.
pub fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
