//! Seeded random streams. Every random draw in the crate goes through here.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Generator name recorded in checkpoints and reports.
pub const RNG_ALGORITHM: &str = "chacha20";

pub type FlowRng = ChaCha20Rng;

pub fn seeded(seed: u64) -> FlowRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Independent counter-based stream `stream` under `seed`, so per-item
/// generation gives the same values whatever the iteration order.
pub fn stream(seed: u64, stream: u64) -> FlowRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed for a named purpose (init, shuffling, sampling, ...)
/// so changing one consumer does not shift the others' streams.
pub fn derive(seed: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose, mixed with the seed (splitmix64 finalizer)
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
