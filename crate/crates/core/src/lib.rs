//! Identification of lifted linear state-space models for nonlinear
//! controlled systems.
//!
//! The pipeline simulates a forced pendulum ([`dynamics`]), optionally turns
//! the angle trace into Mel-spectrogram images ([`spectrogram`]), learns
//! lifting functions with small autoencoders ([`neuralnet`]), fits Koopman
//! and lifted `A, B, C` matrices by least squares ([`koopman`]) and scores
//! open-loop predictions against the simulator ([`eval`]).

pub mod dynamics;
pub mod error;
pub mod eval;
pub mod koopman;
pub mod neuralnet;
pub mod spectrogram;

pub use error::{Error, Result};

/// Mixes a base seed with a stream index (SplitMix64 finalizer), so that
/// related runs get decorrelated yet reproducible seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
