//! Seed derivation for reproducible streams.
//!
//! Every random stream in the pipeline is a `ChaCha8Rng` (rand_chacha 0.3), whose
//! output is fixed by its seed and independent of platform and word size. Streams
//! for independent units of work (one example, one teacher, one pass) are keyed
//! by mixing the base seed with the unit's coordinates, so results do not depend
//! on the order or the thread in which units are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(mix64(base), |acc, &c| mix64(acc ^ mix64(c)))
}

pub fn stream(base: u64, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, coords))
}

/// Stable 64-bit key for a string coordinate such as a language tag.
pub fn str_coord(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
