//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! keyed by a base seed plus a stream tag, so runs replay exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent uses of one base seed from colliding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Probe = 3,
    Split = 4,
    Select = 5,
    Bounds = 6,
    SynthLayout = 7,
    SynthSample = 8,
    SynthHoldout = 9,
    Overlap = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ (stream as u64)) ^ index)
}

pub fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
