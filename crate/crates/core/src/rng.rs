//! Counter-based random streams.
//!
//! Every random draw in a run is taken from a ChaCha stream keyed by
//! `(seed, purpose, step, index)`. Nothing is keyed by worker or thread, so
//! results are bit-identical for any thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Initialize = 1,
    Resample = 2,
    Move = 3,
    Select = 4,
    Accept = 5,
    Data = 6,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th independent child of `seed` (runs, repeats, PIMH iterations).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// The stream for one particle (or one synchronization point when `index = 0`) at one step.
pub fn stream(seed: u64, purpose: Purpose, step: u64, index: u64) -> StreamRng {
    debug_assert!(index < (1 << 32) && step < (1 << 32));
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (purpose as u64).rotate_left(48)));
    rng.set_stream((step << 32) | index);
    rng
}
