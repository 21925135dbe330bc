//! Stable sub-seed derivation.
//!
//! Every random stream in a run is keyed by `(master seed, agent id, purpose, frame)`,
//! so adding an agent or a new purpose never perturbs the draws of any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives an independent 64-bit seed for one stream.
pub fn sub_seed(master: u64, agent: u64, purpose: &str, frame: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ agent);
    h = splitmix64(h ^ fnv1a(purpose));
    splitmix64(h ^ frame)
}

pub fn stream(master: u64, agent: u64, purpose: &str, frame: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master, agent, purpose, frame))
}
