//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a base
//! seed mixed with a short tuple of tags (split id, user, epoch, ...), so that
//! each stream is reproducible on its own and independent of evaluation order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes apart even when the
/// numeric tags coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Negatives = 2,
    ModelInit = 3,
    EpochOrder = 4,
    Synthetic = 5,
    Bootstrap = 6,
    ModelSeed = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: Stream, tags: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ splitmix64(stream as u64));
    for &t in tags {
        h = splitmix64(h ^ t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn rng_for(base: u64, stream: Stream, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, tags))
}

/// A permutation of `0..n`, fixed by `(seed, epoch)`.
pub fn shuffled_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, Stream::EpochOrder, &[epoch]));
    order
}
