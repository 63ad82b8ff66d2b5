//! Seed derivation for every stochastic consumer.
//!
//! A stream is keyed by `(master_seed, purpose)`; adding a new purpose never
//! shifts the numbers drawn by an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for `purpose` under `master`.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(purpose.as_bytes())))
}

pub fn stream(master: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, purpose))
}

/// Stream for the `index`-th member of a family (e.g. the i-th ensemble net).
pub fn indexed_stream(master: u64, purpose: &str, index: usize) -> Rng {
    stream(master, &format!("{purpose}#{index}"))
}

pub fn indexed_seed(master: u64, purpose: &str, index: usize) -> u64 {
    derive_seed(master, &format!("{purpose}#{index}"))
}
