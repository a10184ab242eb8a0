//! Seeded random streams.
//!
//! Every consumer derives its generator from `(master seed, domain, index)`,
//! so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains. Distinct domains never share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    CemSample = 1,
    BoDesign = 2,
    BoCandidates = 3,
    PgInit = 4,
    PgShuffle = 5,
    PgSample = 6,
    SynthItems = 7,
    SynthUser = 8,
    SynthChannel = 9,
    Split = 10,
    Test = 11,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent generator for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> StreamRng {
    let key = splitmix64(seed ^ splitmix64(domain as u64));
    let mut bytes = [0u8; 32];
    let mut k = key;
    for chunk in bytes.chunks_mut(8) {
        k = splitmix64(k);
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(index);
    rng
}
