//! Stable seed derivation and RNG construction.
//!
//! Every stochastic step draws from a ChaCha stream keyed by a seed derived
//! from the run seed and a textual tag, so results do not depend on thread
//! scheduling or on the order in which independent tasks run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over `bytes`, continuing from `state`.
fn fnv1a(mut state: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        state ^= u64::from(*b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// Derives a child seed from `base` and an ordered list of tags.
pub fn derive(base: u64, tags: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &base.to_le_bytes());
    for tag in tags {
        h = fnv1a(h, tag.as_bytes());
        h = fnv1a(h, &[0xff]);
    }
    // splitmix64 finalizer to spread the low-entropy FNV state
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, tags: &[&str]) -> Rng {
    rng(derive(base, tags))
}
