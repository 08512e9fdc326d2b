//! Motor-imagery EEG brain-computer-interface engine.
//!
//! The pipeline runs acquisition → IIR filtering → FFT features → labeled
//! datasets → KNN / LDA / CNN classifiers, and closes the loop through a
//! falling-box game driven either by key presses or by model predictions.
//! A seeded synthetic EEG source makes every stage testable without a
//! headset.

pub mod acquisition;
pub mod dataset;
pub mod engine;
pub mod features;
pub mod models;
pub mod par;
pub mod signal;

/// A fresh random seed for runs where none was chosen. Kept below 2^63 so
/// it round-trips through TOML integers.
pub fn entropy_seed() -> u64 {
    rand::random::<u64>() >> 1
}
