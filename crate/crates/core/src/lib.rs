//! Wound-image segmentation on the CPU.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tensor`]), a
//! MobileNetV2-style encoder-decoder built on it ([`model`]), image and
//! dataset utilities ([`imaging`]), connected-component post-processing
//! ([`postprocess`]), pixel metrics ([`metrics`]) and a synthetic data
//! generator ([`synth`]).

pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod postprocess;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of stream `index` derived from `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index))
}
