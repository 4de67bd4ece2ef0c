//! Core algorithms for facial expression recognition with mid-level
//! representation mixing, graph-embedded uncertainty suppression, a mixed
//! classification loss, weighted prediction merging and similarity-vote
//! prediction correction.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the
//! command-line driver and configuration parsing live in the `fermech` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod correction;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gus;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod mre;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use label::{Label, NUM_CLASSES};
pub use numerics::Tensor;

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
