//! Deterministic RNG plumbing.
//!
//! All randomness in the crate flows from a single root seed, split into
//! independent streams per subsystem (init, data order, dropout, sampler).
//! Streams are derived statelessly, so reproducing any point of a run needs
//! only the root seed and the counters already tracked by training state.

use rand::SeedableRng;

/// The one RNG used everywhere: portable, seedable, fast.
pub type DetRng = rand_chacha::ChaCha8Rng;

/// RNG seeded directly from a 64-bit value.
pub fn seed_rng(seed: u64) -> DetRng {
    DetRng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a subsystem seed from the root seed and a tag.
pub fn split(root: u64, tag: &str) -> u64 {
    splitmix64(root ^ fnv1a(tag))
}

/// Derive a seed from the root, a tag, and two counters (e.g. step, window).
pub fn split_indexed(root: u64, tag: &str, a: u64, b: u64) -> u64 {
    splitmix64(split(root, tag) ^ splitmix64(a).rotate_left(17) ^ splitmix64(b.wrapping_add(0x51ed_270b)))
}
