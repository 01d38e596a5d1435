//! Hierarchical Bayes small-area poverty estimation.
//!
//! The pipeline runs in five stages, each in its own module:
//!
//! - [`data`] ingests household survey records and comuna covariates.
//! - [`sampler`] fits the three-level normal model on `ln(income + 1)` by
//!   Gibbs sampling with slice updates for the standard deviations.
//! - [`fgt`] turns posterior draws into a matrix of FGT poverty indices
//!   (one row per comuna, one column per draw) and computes direct
//!   survey-weighted estimates.
//! - [`decide`] answers point-estimation, exceedance and extreme-area
//!   questions from that matrix.
//! - [`synth`] generates synthetic populations and samples with known truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod decide;
pub mod fgt;
pub mod sampler;
pub mod special;
pub mod synth;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// ChaCha8 generator for `(master_seed, key, tag)` on stream number
/// `stream`. The 32-byte seed holds the master seed in bytes 0..8, the key
/// in bytes 8..16 and the tag in byte 16, all little endian.
pub fn seeded_stream(master_seed: u64, key: u64, tag: u8, stream: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&key.to_le_bytes());
    seed[16] = tag;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng
}

/// Formats a float with 17 significant digits, enough for a bit-exact
/// round trip through text.
pub fn format_float(x: f64) -> String {
    format!("{:.16e}", x)
}
