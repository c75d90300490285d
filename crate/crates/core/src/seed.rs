//! Deterministic derivation of independent RNG streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named streams so that changing how one stage consumes randomness never
/// perturbs another stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Pretrain = 2,
    Lloyd = 3,
    Train = 4,
    Synth = 5,
    FinalLloyd = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream as u64)) ^ index)
}

pub fn rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}
