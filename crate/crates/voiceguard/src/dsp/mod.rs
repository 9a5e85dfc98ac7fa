//! Deterministic signal-processing primitives.
//!
//! Every differentiable operation here comes with an exact vector–Jacobian
//! companion (`*_vjp` functions or `backward` methods on forward-state
//! structs) so that scalar losses defined on spectral representations can be
//! pulled back to raw waveform samples. All math is `f64`; all functions are
//! pure and safe to call concurrently.

mod filter;
mod mel;
mod resample;
mod stft;

pub use filter::{biquad_filter, FilterKind};
pub use mel::{
    mel_filterbank, mel_spectrogram, mel_spectrogram_forward, mfcc, mfcc_from_logmel, MelForward,
    MelProjection,
};
pub use resample::{resample, resample_ratio, resample_ratio_vjp, SUPPORTED_RATES};
pub use stft::{
    hann_window, istft, istft_len, magnitude, magnitude_vjp, stft, stft_vjp, ComplexSpectrogram,
};

use crate::error::{Error, Result};

/// Canonical internal sample rate; all loaded audio is resampled to this.
pub const CANONICAL_RATE: u32 = 16_000;

/// Floor applied to mel energies before log compression.
pub const LOG_FLOOR: f64 = 1e-10;

/// A mono audio signal.
///
/// Samples are amplitudes in `[-1, 1]` after load-time normalization;
/// internally generated reference signals may exceed the range marginally.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, id: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate,
            id: id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Same samples under a different label.
    pub fn relabel(&self, id: impl Into<String>) -> Self {
        Self {
            samples: self.samples.clone(),
            sample_rate: self.sample_rate,
            id: id.into(),
        }
    }
}

/// Short-time Fourier transform parameters.
///
/// The window is always a periodic Hann window, which satisfies the
/// constant-overlap-add property whenever `hop` divides `win`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
}

impl Default for FftParams {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            win: 1024,
        }
    }
}

impl FftParams {
    pub fn new(n_fft: usize, hop: usize, win: usize) -> Result<Self> {
        let p = Self { n_fft, hop, win };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.win == 0 || self.n_fft == 0 {
            return Err(Error::InvalidConfig("fft params must be nonzero".into()));
        }
        if !(self.hop <= self.win && self.win <= self.n_fft) {
            return Err(Error::InvalidConfig(format!(
                "need hop <= win <= n_fft, got hop={} win={} n_fft={}",
                self.hop, self.win, self.n_fft
            )));
        }
        if !cola_holds(self.win, self.hop) {
            return Err(Error::InvalidConfig(format!(
                "hann window of {} does not satisfy COLA at hop {}",
                self.win, self.hop
            )));
        }
        Ok(())
    }

    /// Number of retained (one-sided) frequency bins.
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a signal of `len` samples after center padding.
    pub fn frames(&self, len: usize) -> usize {
        let padded = len + 2 * (self.win / 2);
        (padded - self.win) / self.hop + 1
    }
}

/// Checks the constant-overlap-add property of the periodic Hann window
/// numerically: the lattice sum of shifted windows must be constant.
fn cola_holds(win: usize, hop: usize) -> bool {
    let w = hann_window(win);
    let mut sums = vec![0.0f64; hop];
    for start in (0..win).step_by(hop) {
        for n in 0..hop {
            if start + n < win {
                sums[n] += w[start + n];
            }
        }
    }
    let first = sums[0];
    sums.iter().all(|s| (s - first).abs() < 1e-9)
}

/// Mel filterbank parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelParams {
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelParams {
    pub fn new(n_mels: usize, fmin: f64, fmax: f64) -> Self {
        Self { n_mels, fmin, fmax }
    }

    /// 80 bands over the full band of the canonical rate.
    pub fn default_for(sample_rate: u32) -> Self {
        Self {
            n_mels: 80,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
        }
    }
}

impl Default for MelParams {
    fn default() -> Self {
        Self::default_for(CANONICAL_RATE)
    }
}

/// A magnitude spectrogram, `frames x (n_fft/2 + 1)`, all values >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: ndarray::Array2<f64>,
    pub params: FftParams,
}

/// A log-compressed mel spectrogram, `frames x n_mels`. Finite everywhere:
/// energies are floored at [`LOG_FLOOR`] before the log.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub bins: ndarray::Array2<f64>,
    pub params: MelParams,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.bins.nrows()
    }
}

/// A cepstral coefficient sequence, `frames x 13` (c0 excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct MfccSequence {
    pub coeffs: ndarray::Array2<f64>,
}

impl MfccSequence {
    pub fn frames(&self) -> usize {
        self.coeffs.nrows()
    }
}

/// Number of retained cepstral coefficients (c1..c13).
pub const MFCC_COEFFS: usize = 13;
