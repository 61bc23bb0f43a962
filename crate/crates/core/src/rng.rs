//! Counter-based random streams derived from a single run seed.
//!
//! Every consumer asks for a stream by `(domain, index)`; streams never share
//! state, so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Values are part of the reproducibility contract.
pub mod domain {
    pub const SYNTH_VIDEO: u64 = 1;
    pub const SYNTH_SIGNATURE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const TRAIN_ELEMENT: u64 = 5;
    pub const SAMPLE_VIDEO: u64 = 6;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed) ^ splitmix(domain.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Stream keyed by two counters (e.g. step and batch element).
pub fn stream2(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    stream(seed, domain, splitmix(a) ^ b.rotate_left(32))
}
