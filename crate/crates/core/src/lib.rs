//! End-to-end semi-supervised multi-tissue segmentation of multi-contrast
//! MR-like images, exercised on a synthetic thigh-phantom corpus.
//!
//! The crate is organized along the pipeline:
//!
//! - [`tensor`]: reverse-mode autodiff engine with the conv/BN/pool/softmax
//!   primitives the networks need, plus Adam and Xavier init.
//! - [`dropout`]: regular, variational, and targeted dropout.
//! - [`preprocess`]: bias-field correction, edge-preserving diffusion,
//!   landmark intensity standardization to [1, 4095].
//! - [`data`]: phantom generator, volume I/O, subject-level splits.
//! - [`nets`]: densely-connected encoder-decoder (plus a U-Net baseline).
//! - [`train`]: supervised loop, self-training protocol, cross-validation.
//! - [`metrics`]: Dice / sensitivity / specificity / HD95 and reports.
//! - [`experiments`]: the phantom benchmarks and the contrast ablation grid.

pub mod data;
pub mod dropout;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod metrics;
pub mod nets;
pub mod pnm;
pub mod preprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Deterministic rng used everywhere; seeded explicitly, never from the OS.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Derives an independent rng stream from a base seed and a stream label
/// (fold index, epoch number, ...). SplitMix64-style mixing.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded rng constructor.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
