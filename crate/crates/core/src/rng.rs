//! Counter-based random streams.
//!
//! Every stochastic draw in the crate comes from a stream keyed by a seed and a
//! tuple of counters (epoch, sample, rollout, ...). Results therefore do not
//! depend on thread scheduling or on the order in which work items run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    let mut state = splitmix64(seed);
    for &k in keys {
        state = splitmix64(state ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut bytes = [0u8; 32];
    for (i, chunk) in bytes.chunks_mut(8).enumerate() {
        state = splitmix64(state.wrapping_add(i as u64));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stable 64-bit FNV-1a hash, used to key streams by sample id.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for a named stage or split of a run, derived from the run's seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    stream(seed, &[tag::DERIVE, hash_str(label)]).next_u64()
}

/// Stream domain tags, so that different stages never share a stream.
pub(crate) mod tag {
    pub const GENERATE: u64 = 1;
    pub const SUBSAMPLE: u64 = 2;
    pub const ROLLOUT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PSEUDO: u64 = 5;
    pub const INIT: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const THEORY: u64 = 8;
    pub const DERIVE: u64 = 9;
}
