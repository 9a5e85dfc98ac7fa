//! Mel filterbank, log-mel spectrogram, and MFCC extraction.
//!
//! The filterbank places `n_mels` triangular (hat) responses at uniform
//! points on the mel axis, with the first and last peaks sitting exactly on
//! `fmin` and `fmax`. Adjacent slopes share edges, so the rows form a
//! partition of unity: every FFT bin's total weight is exactly 1, and every
//! row has a strictly positive sum.

use ndarray::{Array1, Array2};

use super::{
    magnitude, magnitude_vjp, stft, stft_vjp, ComplexSpectrogram, FftParams, MelParams,
    MelSpectrogram, MfccSequence, Spectrogram, Waveform, LOG_FLOOR, MFCC_COEFFS,
};
use crate::error::Result;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Triangular mel filterbank, `n_mels x bins`.
pub fn mel_filterbank(p: &FftParams, m: &MelParams, sample_rate: u32) -> Array2<f64> {
    let bins = p.bins();
    if m.n_mels == 1 {
        // A single band covers everything.
        return Array2::ones((1, bins));
    }
    let mel_lo = hz_to_mel(m.fmin);
    let mel_hi = hz_to_mel(m.fmax);
    let step = (mel_hi - mel_lo) / (m.n_mels - 1) as f64;
    let peaks: Vec<f64> = (0..m.n_mels).map(|i| mel_lo + i as f64 * step).collect();

    let mut fb = Array2::zeros((m.n_mels, bins));
    for b in 0..bins {
        let f = b as f64 * sample_rate as f64 / p.n_fft as f64;
        let mel = hz_to_mel(f.min(m.fmax).max(m.fmin));
        for (i, &peak) in peaks.iter().enumerate() {
            let w = 1.0 - (mel - peak).abs() / step;
            if w > 0.0 {
                fb[[i, b]] = w;
            }
        }
    }
    fb
}

/// The magnitude -> log-mel projection `ln(max(Mel * mag^2, floor))`, kept as
/// a reusable piece so composite losses can share one STFT between the
/// surrogate input path and the mel target path.
pub struct MelProjection {
    pub filterbank: Array2<f64>,
    pub params: MelParams,
}

impl MelProjection {
    pub fn new(p: &FftParams, m: &MelParams, sample_rate: u32) -> Self {
        Self {
            filterbank: mel_filterbank(p, m, sample_rate),
            params: *m,
        }
    }

    /// Returns pre-floor band energies and the log-mel bins.
    pub fn forward(&self, mag: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let power = mag.mapv(|v| v * v);
        let energies = power.dot(&self.filterbank.t());
        let logmel = energies.mapv(|e| e.max(LOG_FLOOR).ln());
        (energies, logmel)
    }

    /// Pullback of a log-mel gradient to a magnitude-bin gradient.
    pub fn vjp(
        &self,
        mag: &Array2<f64>,
        energies: &Array2<f64>,
        d_logmel: &Array2<f64>,
    ) -> Array2<f64> {
        // d/dE of ln(max(E, floor)): 1/E above the floor, 0 below it.
        let mut d_energy = Array2::zeros(energies.raw_dim());
        for ((f, m), &e) in energies.indexed_iter() {
            if e >= LOG_FLOOR {
                d_energy[[f, m]] = d_logmel[[f, m]] / e;
            }
        }
        let d_power = d_energy.dot(&self.filterbank);
        2.0 * mag * &d_power
    }
}

/// Retained forward state for the waveform -> log-mel chain, so the exact
/// gradient can be pulled back without recomputing the transform.
pub struct MelForward {
    pub complex: ComplexSpectrogram,
    pub magnitude: Spectrogram,
    /// Pre-floor band energies, `frames x n_mels`.
    pub energies: Array2<f64>,
    pub logmel: MelSpectrogram,
    projection: MelProjection,
}

impl MelForward {
    /// Gradient of a scalar loss with respect to the input samples, given the
    /// loss gradient over the log-mel bins.
    pub fn backward(&self, d_logmel: &Array2<f64>) -> Vec<f64> {
        let d_mag = self.backward_to_magnitude(d_logmel);
        let (d_re, d_im) = magnitude_vjp(&self.complex, &self.magnitude, &d_mag);
        stft_vjp(&self.complex, &d_re, &d_im)
    }

    /// Partial pullback: log-mel gradient to magnitude-bin gradient.
    pub fn backward_to_magnitude(&self, d_logmel: &Array2<f64>) -> Array2<f64> {
        self.projection
            .vjp(&self.magnitude.bins, &self.energies, d_logmel)
    }
}

/// Log-mel spectrogram with retained state for gradients:
/// `ln(max(Mel * |STFT|^2, floor))`.
pub fn mel_spectrogram_forward(
    x: &Waveform,
    p: &FftParams,
    m: &MelParams,
) -> Result<MelForward> {
    let complex = stft(x, p)?;
    let mag = magnitude(&complex);
    let projection = MelProjection::new(p, m, x.sample_rate);
    let (energies, logmel) = projection.forward(&mag.bins);
    Ok(MelForward {
        complex,
        magnitude: mag,
        energies,
        logmel: MelSpectrogram {
            bins: logmel,
            params: *m,
        },
        projection,
    })
}

/// Log-mel spectrogram without retained gradient state.
pub fn mel_spectrogram(x: &Waveform, p: &FftParams, m: &MelParams) -> Result<MelSpectrogram> {
    Ok(mel_spectrogram_forward(x, p, m)?.logmel)
}

/// Orthonormal DCT-II row for coefficient `k` over `m` bands.
fn dct_row(k: usize, m: usize) -> Array1<f64> {
    let scale = if k == 0 {
        (1.0 / m as f64).sqrt()
    } else {
        (2.0 / m as f64).sqrt()
    };
    Array1::from_shape_fn(m, |j| {
        scale * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2 * m) as f64).cos()
    })
}

/// MFCCs from a log-mel spectrogram: orthonormal DCT-II per frame,
/// coefficients 1..=13 retained (c0 dropped).
pub fn mfcc_from_logmel(mel: &MelSpectrogram) -> MfccSequence {
    let frames = mel.frames();
    let m = mel.bins.ncols();
    let k = MFCC_COEFFS.min(m.saturating_sub(1)).max(1);
    let mut coeffs = Array2::zeros((frames, k));
    let rows: Vec<Array1<f64>> = (1..=k).map(|c| dct_row(c, m)).collect();
    for f in 0..frames {
        let frame = mel.bins.row(f);
        for (c, row) in rows.iter().enumerate() {
            coeffs[[f, c]] = frame.dot(row);
        }
    }
    MfccSequence { coeffs }
}

/// MFCC sequence of a waveform under the default transform parameters.
pub fn mfcc(x: &Waveform) -> Result<MfccSequence> {
    let p = FftParams::default();
    let m = MelParams::default_for(x.sample_rate);
    Ok(mfcc_from_logmel(&mel_spectrogram(x, &p, &m)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::CANONICAL_RATE;
    use rand::{Rng, SeedableRng};

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..len).map(|_| rng.random_range(-0.9..0.9)).collect();
        Waveform::new(samples, CANONICAL_RATE, "rand")
    }

    #[test]
    fn filterbank_partitions_frequency() {
        let p = FftParams::default();
        let m = MelParams::default();
        let fb = mel_filterbank(&p, &m, CANONICAL_RATE);
        // Column sums by direct summation: every FFT bin's total triangle
        // weight must lie in (0, 1].
        for b in 0..p.bins() {
            let total: f64 = (0..m.n_mels).map(|i| fb[[i, b]]).sum();
            assert!(total > 0.0, "bin {b} got zero weight");
            assert!(total <= 1.0 + 1e-9, "bin {b} total {total}");
        }
        // Row sums strictly positive by construction.
        for i in 0..m.n_mels {
            let row: f64 = (0..p.bins()).map(|b| fb[[i, b]]).sum();
            assert!(row > 0.0, "row {i} empty");
        }
    }

    #[test]
    fn white_noise_clears_the_log_floor() {
        let x = random_wave(4096, 5);
        let mel = mel_spectrogram(&x, &FftParams::default(), &MelParams::default()).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(mel.bins.iter().all(|v| *v > floor));
    }

    #[test]
    fn zero_input_sits_on_the_log_floor() {
        let x = Waveform::new(vec![0.0; 2048], CANONICAL_RATE, "zeros");
        let mel = mel_spectrogram(&x, &FftParams::default(), &MelParams::default()).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(mel.bins.iter().all(|v| *v == floor));
    }

    #[test]
    fn mel_gradient_matches_finite_differences() {
        let p = FftParams::new(64, 16, 64).unwrap();
        let m = MelParams::new(16, 0.0, 8000.0);
        let x = random_wave(256, 17);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(18);

        let fwd = mel_spectrogram_forward(&x, &p, &m).unwrap();
        let c = Array2::from_shape_fn(fwd.logmel.bins.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let g = fwd.backward(&c);

        let loss = |w: &Waveform| -> f64 {
            let mel = mel_spectrogram(w, &p, &m).unwrap();
            (&mel.bins * &c).sum()
        };
        let h = 1e-6;
        for idx in [0usize, 17, 80, 150, 230, 255] {
            let mut xp = x.clone();
            xp.samples[idx] += h;
            let mut xm = x.clone();
            xm.samples[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-12);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs vjp {}", g[idx]);
        }
    }

    #[test]
    fn mfcc_is_deterministic() {
        let x = random_wave(3000, 23);
        let a = mfcc(&x).unwrap();
        let b = mfcc(&x).unwrap();
        assert_eq!(a.coeffs, b.coeffs);
    }

    #[test]
    fn constant_logmel_frame_has_zero_coefficients() {
        // A constant lives entirely in c0, which is dropped.
        let mel = MelSpectrogram {
            bins: Array2::from_elem((4, 80), 3.7),
            params: MelParams::default(),
        };
        let c = mfcc_from_logmel(&mel);
        assert!(c.coeffs.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn dct_matches_cosine_sum_oracle() {
        // Hand-sized 4-band frame checked against a direct cosine-sum
        // evaluation of the orthonormal DCT-II.
        let frame = [0.3, -1.2, 0.5, 2.0];
        let mel = MelSpectrogram {
            bins: Array2::from_shape_vec((1, 4), frame.to_vec()).unwrap(),
            params: MelParams::new(4, 0.0, 8000.0),
        };
        let got = mfcc_from_logmel(&mel);
        assert_eq!(got.coeffs.ncols(), 3);
        let m = 4usize;
        for k in 1..m {
            let scale = (2.0 / m as f64).sqrt();
            let expect: f64 = frame
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    v * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2 * m) as f64)
                        .cos()
                })
                .sum::<f64>()
                * scale;
            assert!((got.coeffs[[0, k - 1]] - expect).abs() < 1e-12);
        }
    }
}
