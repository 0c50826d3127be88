//! Seed splitting.
//!
//! Every random stream in a run is derived from the single master seed by a
//! counter-based hash, so any component can be replayed in isolation:
//!
//! ```text
//! derive(seed, path) = fold(path, splitmix64(seed), |h, x| splitmix64(h ^ splitmix64(x)))
//! ```
//!
//! where `splitmix64` is the standard SplitMix64 finalizer (increment
//! `0x9E3779B97F4A7C15`, multipliers `0xBF58476D1CE4E5B9` and
//! `0x94D049BB133111EB`). The resulting 64-bit value seeds a ChaCha8 stream via
//! `SeedableRng::seed_from_u64`. The first element of every path is a
//! [`Stream`] tag; the remaining elements are round numbers, client ids, or
//! attempt counters, as listed on each tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags. The numeric values are part of the replay contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Class centers of the synthetic task. Path: `[tag]`.
    Centers = 1,
    /// Training samples. Path: `[tag]`.
    Train = 2,
    /// Public samples. Path: `[tag]`.
    Public = 3,
    /// Held-out test samples. Path: `[tag]`.
    Test = 4,
    /// Dirichlet partition. Path: `[tag, attempt]`.
    Partition = 5,
    /// Initial global adapter. Path: `[tag]`.
    AdapterInit = 6,
    /// Initial backbones. Path: `[tag]` when shared, `[tag, client]` otherwise.
    BackboneInit = 7,
    /// Client selection. Path: `[tag, round]`.
    Selection = 8,
    /// Mini-batch shuffling. Path: `[tag, round, client]`.
    Training = 9,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |h, &x| splitmix64(h ^ splitmix64(x)))
}

pub fn stream(seed: u64, tag: Stream, rest: &[u64]) -> StreamRng {
    let mut path = Vec::with_capacity(rest.len() + 1);
    path.push(tag as u64);
    path.extend_from_slice(rest);
    StreamRng::seed_from_u64(derive(seed, &path))
}
