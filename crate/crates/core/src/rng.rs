//! Seeded, splittable random streams.
//!
//! Every consumer of randomness derives its own PCG64 generator from
//! `(seed, purpose, a, b)` through a SplitMix64 mixing chain, so streams for
//! different iterations, episodes and purposes are independent and can be
//! recreated in any order.

use rand::SeedableRng;
use rand_pcg::Pcg64;

pub type Prng = Pcg64;

/// What a stream is used for; part of the derivation key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    World = 2,
    Episode = 3,
    Grammar = 4,
    Rollout = 5,
    WordDrop = 6,
    Eval = 7,
    Labels = 8,
    Fixture = 9,
    Batch = 10,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit sub-seed.
pub fn derive_seed(seed: u64, purpose: Purpose, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> Prng {
    let s = derive_seed(seed, purpose, a, b);
    Pcg64::seed_from_u64(s)
}
