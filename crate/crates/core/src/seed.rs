//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness (weight init, dropout masks, shuffling,
//! augmentation, MC passes) asks for its own stream keyed by a name and a
//! sequence of indices, so a stream can be reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every derived stream.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a 64-bit seed for the stream `name` at position `indices`.
pub fn derive(seed: u64, name: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ fnv1a(name.as_bytes()));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// A generator for the stream `name` at position `indices`.
pub fn stream(seed: u64, name: &str, indices: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive(seed, name, indices))
}
