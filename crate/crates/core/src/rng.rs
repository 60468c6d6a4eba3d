//! Deterministic random streams.
//!
//! Every stochastic choice in a run draws from a ChaCha stream keyed by the
//! scenario seed and a fixed stream label, so components never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Arrivals = 1,
    Tracker = 2,
    Swarm = 3,
    Repetition = 4,
    Dataset = 5,
}

pub fn stream(seed: u64, which: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Seed for repetition `rep` of a sweep cell; repetition 0 keeps the base seed.
pub fn derive_seed(base: u64, rep: u32) -> u64 {
    if rep == 0 {
        return base;
    }
    // splitmix64 finaliser over (base, rep)
    let mut z = base ^ (u64::from(rep)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
