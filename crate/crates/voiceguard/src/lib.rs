//! Voice-protection toolkit.
//!
//! Embeds small, amplitude-bounded error-minimizing perturbations into speech
//! waveforms so that a generative spectrogram synthesizer trained (or
//! conditioned) on the protected audio produces low-quality, dissimilar
//! output, while the protected audio itself stays close to the original for
//! human listeners.
//!
//! The crate is organised around the protection pipeline:
//!
//! - [`dsp`] — deterministic signal-processing primitives (STFT/iSTFT, mel
//!   filterbank, MFCC, resampling, biquad filters), each with an exact
//!   vector–Jacobian companion so gradients can flow from any loss back to
//!   raw samples.
//! - [`surrogate`] — a small differentiable spectrogram generator standing in
//!   for the attacker's synthesizer, with exact gradients with respect to its
//!   parameters and the input waveform.
//! - [`objectives`] — the protection losses (mel reconstruction, noise
//!   concealment, perception) and their gradients.
//! - [`protector`] — the perturbation generator: signed-gradient descent
//!   inside the epsilon ball.
//! - [`metrics`] — MCD (with DTW), SNR, speaker similarity, STOI, and word
//!   error rate via an optional external ASR service.
//! - [`adversary`] — the adaptive-attacker toolbox: data augmentations,
//!   spectral-gating denoise, adversarial counter-perturbation, and NES-based
//!   black-box recovery.
//! - [`pipeline`] — end-to-end experiment drivers and report emission.
//! - [`wav`] — PCM16 mono WAV reading/writing.

pub mod adversary;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod protector;
pub mod surrogate;
pub mod synth;
pub mod wav;

pub use error::{Error, Result};
