//! Short-time Fourier transform, inverse, and their exact adjoints.
//!
//! The forward transform center-pads the signal by `win/2` with reflection,
//! slides a periodic Hann window at `hop`, and keeps the one-sided complex
//! spectrum (`n_fft/2 + 1` bins) of each frame. The transform is linear, so
//! its adjoint — needed to pull loss gradients back to raw samples — is
//! exact: an unnormalized inverse FFT of the (zero-extended) bin gradients,
//! windowing, overlap-scatter, and reflection fold-back.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FftParams, Spectrogram, Waveform};
use crate::error::{Error, Result};

thread_local! {
    static PLAN_CACHE: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLAN_CACHE.with(|c| {
        c.borrow_mut()
            .entry((n, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// One-sided complex spectrogram retained for inversion and gradients.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    /// Real parts, `frames x (n_fft/2 + 1)`.
    pub re: Array2<f64>,
    /// Imaginary parts, same shape.
    pub im: Array2<f64>,
    pub params: FftParams,
    pub sample_rate: u32,
    /// Length of the originating signal; `istft` trims back to it.
    pub orig_len: Option<usize>,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.re.nrows()
    }
}

/// Reflection-pad by `pad` samples on each side (no edge repetition).
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let len = x.len();
    debug_assert!(pad < len, "reflection pad needs len > pad");
    let mut out = Vec::with_capacity(len + 2 * pad);
    for p in 0..pad {
        out.push(x[pad - p]);
    }
    out.extend_from_slice(x);
    for q in 0..pad {
        out.push(x[len - 2 - q]);
    }
    out
}

/// Adjoint of [`reflect_pad`]: folds padded-region gradients back onto the
/// interior samples they mirror.
fn reflect_pad_vjp(g_padded: &[f64], len: usize, pad: usize) -> Vec<f64> {
    let mut g = vec![0.0; len];
    for (i, gi) in g.iter_mut().enumerate() {
        *gi = g_padded[pad + i];
    }
    for p in 0..pad {
        g[pad - p] += g_padded[p];
    }
    for q in 0..pad {
        g[len - 2 - q] += g_padded[pad + len + q];
    }
    g
}

/// Short-time Fourier transform.
///
/// Errors with [`Error::TooShort`] when the signal does not cover one
/// analysis window.
pub fn stft(x: &Waveform, p: &FftParams) -> Result<ComplexSpectrogram> {
    p.validate()?;
    if x.len() < p.win {
        return Err(Error::TooShort {
            len: x.len(),
            min: p.win,
        });
    }
    let pad = p.win / 2;
    let padded = reflect_pad(&x.samples, pad);
    let n_frames = p.frames(x.len());
    let bins = p.bins();
    let window = hann_window(p.win);
    let fft = plan(p.n_fft, false);

    let mut re = Array2::zeros((n_frames, bins));
    let mut im = Array2::zeros((n_frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
    for f in 0..n_frames {
        let start = f * p.hop;
        for n in 0..p.n_fft {
            let v = if n < p.win {
                padded[start + n] * window[n]
            } else {
                0.0
            };
            buf[n] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (b, c) in buf.iter().take(bins).enumerate() {
            re[[f, b]] = c.re;
            im[[f, b]] = c.im;
        }
    }
    Ok(ComplexSpectrogram {
        re,
        im,
        params: *p,
        sample_rate: x.sample_rate,
        orig_len: Some(x.len()),
    })
}

/// Adjoint of [`stft`]: pulls complex-bin gradients (as d(Re), d(Im)) back to
/// a gradient over the original samples.
pub fn stft_vjp(s: &ComplexSpectrogram, d_re: &Array2<f64>, d_im: &Array2<f64>) -> Vec<f64> {
    let p = &s.params;
    let len = s
        .orig_len
        .expect("stft_vjp needs a spectrogram produced by stft");
    let pad = p.win / 2;
    let n_frames = s.frames();
    let bins = p.bins();
    let window = hann_window(p.win);
    let ifft = plan(p.n_fft, true);

    let mut g_padded = vec![0.0; len + 2 * pad];
    let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
    for f in 0..n_frames {
        for b in 0..p.n_fft {
            buf[b] = if b < bins {
                Complex::new(d_re[[f, b]], d_im[[f, b]])
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        // rustfft's inverse is the unnormalized conjugate transpose of the
        // forward transform, which is exactly the adjoint we need.
        ifft.process(&mut buf);
        let start = f * p.hop;
        for n in 0..p.win {
            g_padded[start + n] += window[n] * buf[n].re;
        }
    }
    reflect_pad_vjp(&g_padded, len, pad)
}

/// Length of the untrimmed overlap-add reconstruction.
pub fn istft_len(frames: usize, p: &FftParams) -> usize {
    (frames - 1) * p.hop + p.win
}

/// Inverse STFT: overlap-add synthesis with window-square normalization.
///
/// When the spectrogram was produced by [`stft`], the output is trimmed back
/// to the original signal length; hand-built spectrograms reconstruct the
/// full `(frames-1)*hop + win` span. Requires `p` to match the parameters the
/// spectrogram carries.
pub fn istft(s: &ComplexSpectrogram, p: &FftParams) -> Result<Waveform> {
    if *p != s.params {
        return Err(Error::ParamMismatch(format!(
            "spectrogram built with {:?}, istft called with {:?}",
            s.params, p
        )));
    }
    let n_frames = s.frames();
    if n_frames == 0 {
        return Err(Error::EmptyInput("istft of zero frames".into()));
    }
    let bins = p.bins();
    let window = hann_window(p.win);
    let ifft = plan(p.n_fft, true);
    let full = istft_len(n_frames, p);

    let mut num = vec![0.0; full];
    let mut den = vec![0.0; full];
    let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
    for f in 0..n_frames {
        // Rebuild the full spectrum assuming a real time-domain frame.
        for b in 0..bins {
            buf[b] = Complex::new(s.re[[f, b]], s.im[[f, b]]);
        }
        for b in bins..p.n_fft {
            let m = p.n_fft - b;
            buf[b] = Complex::new(s.re[[f, m]], -s.im[[f, m]]);
        }
        ifft.process(&mut buf);
        let scale = 1.0 / p.n_fft as f64;
        let start = f * p.hop;
        for n in 0..p.win {
            num[start + n] += window[n] * buf[n].re * scale;
            den[start + n] += window[n] * window[n];
        }
    }
    let full_signal: Vec<f64> = num
        .iter()
        .zip(den.iter())
        .map(|(n, d)| if *d > 1e-10 { n / d } else { 0.0 })
        .collect();

    let samples = match s.orig_len {
        Some(len) => {
            let pad = p.win / 2;
            full_signal[pad..pad + len].to_vec()
        }
        None => full_signal,
    };
    Ok(Waveform::new(samples, s.sample_rate, "istft"))
}

/// Magnitudes of a complex spectrogram.
pub fn magnitude(s: &ComplexSpectrogram) -> Spectrogram {
    let bins = ndarray::Zip::from(&s.re)
        .and(&s.im)
        .map_collect(|r, i| (r * r + i * i).sqrt());
    Spectrogram {
        bins,
        params: s.params,
    }
}

/// Adjoint of [`magnitude`]: maps a magnitude gradient to complex-bin
/// gradients. Uses the zero subgradient at exactly-zero magnitude.
pub fn magnitude_vjp(
    s: &ComplexSpectrogram,
    mag: &Spectrogram,
    d_mag: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut d_re = Array2::zeros(s.re.raw_dim());
    let mut d_im = Array2::zeros(s.im.raw_dim());
    for ((f, b), &m) in mag.bins.indexed_iter() {
        if m > 0.0 {
            let g = d_mag[[f, b]] / m;
            d_re[[f, b]] = g * s.re[[f, b]];
            d_im[[f, b]] = g * s.im[[f, b]];
        }
    }
    (d_re, d_im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tone(freq: f64, len: usize, sr: u32, amp: f64) -> Waveform {
        let samples = (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr, "tone")
    }

    fn random_wave(len: usize, seed: u64, sr: u32) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..len).map(|_| rng.random_range(-0.9..0.9)).collect();
        Waveform::new(samples, sr, "rand")
    }

    /// Naive O(n^2) DFT of one windowed frame.
    fn dft_oracle(frame: &[f64], n_fft: usize) -> Vec<(f64, f64)> {
        let bins = n_fft / 2 + 1;
        let mut out = Vec::with_capacity(bins);
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            out.push((re, im));
        }
        out
    }

    #[test]
    fn matches_direct_dft_and_concentrates_bin7() {
        let p = FftParams::default();
        let sr = 16_000;
        // Bin-7 center frequency for the 1024-point transform.
        let freq = 7.0 * sr as f64 / p.n_fft as f64;
        let x = tone(freq, 4096, sr, 0.5);
        let s = stft(&x, &p).unwrap();

        // Oracle on an interior frame (away from reflection padding).
        let pad = p.win / 2;
        let padded = reflect_pad(&x.samples, pad);
        let window = hann_window(p.win);
        let f = 8;
        let frame: Vec<f64> = (0..p.win)
            .map(|n| padded[f * p.hop + n] * window[n])
            .collect();
        let oracle = dft_oracle(&frame, p.n_fft);
        for (b, (re, im)) in oracle.iter().enumerate() {
            assert!((s.re[[f, b]] - re).abs() < 1e-8, "re mismatch at bin {b}");
            assert!((s.im[[f, b]] - im).abs() < 1e-8, "im mismatch at bin {b}");
        }

        // The Hann main lobe spans one bin either side of the tone.
        let energy: Vec<f64> = (0..p.bins())
            .map(|b| s.re[[f, b]].powi(2) + s.im[[f, b]].powi(2))
            .collect();
        let total: f64 = energy.iter().sum();
        let lobe: f64 = energy[6..=8].iter().sum();
        let peak = energy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, 7);
        assert!(lobe / total >= 0.95, "lobe share {}", lobe / total);
    }

    #[test]
    fn zero_in_zero_out() {
        let p = FftParams::default();
        let x = Waveform::new(vec![0.0; 2048], 16_000, "zeros");
        let s = stft(&x, &p).unwrap();
        assert!(s.re.iter().all(|v| *v == 0.0));
        assert!(s.im.iter().all(|v| *v == 0.0));
        let m = magnitude(&s);
        assert!(m.bins.iter().all(|v| *v == 0.0));
        let y = istft(&s, &p).unwrap();
        assert!(y.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_short_is_an_error() {
        let p = FftParams::default();
        let x = Waveform::new(vec![0.1; 1023], 16_000, "short");
        match stft(&x, &p) {
            Err(Error::TooShort { len, min }) => {
                assert_eq!(len, 1023);
                assert_eq!(min, 1024);
            }
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn istft_roundtrip_reconstructs() {
        let p = FftParams::default();
        let x = random_wave(5000, 7, 16_000);
        let s = stft(&x, &p).unwrap();
        let y = istft(&s, &p).unwrap();
        assert_eq!(y.len(), x.len());
        let err = x
            .samples
            .iter()
            .zip(y.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-6, "max reconstruction error {err}");
    }

    #[test]
    fn istft_param_mismatch_rejected() {
        let p = FftParams::default();
        let x = random_wave(2048, 3, 16_000);
        let s = stft(&x, &p).unwrap();
        let other = FftParams::new(1024, 512, 1024).unwrap();
        assert!(matches!(istft(&s, &other), Err(Error::ParamMismatch(_))));
    }

    #[test]
    fn single_frame_bin0_impulse_inverts_to_constant() {
        // Closed form: the inverse DFT of a one-hot frame at bin 0 (DC) is
        // the constant c = 1/n_fft, so the overlap-add numerator is the
        // windowed constant segment w[n]*c. With a single frame the
        // window-square normalization divides by w[n]^2, leaving c/w[n]
        // wherever the window carries weight — i.e. y[n]*w[n] = c.
        let p = FftParams::new(64, 16, 64).unwrap();
        let bins = p.bins();
        let mut re = Array2::zeros((1, bins));
        re[[0, 0]] = 1.0;
        let s = ComplexSpectrogram {
            re,
            im: Array2::zeros((1, bins)),
            params: p,
            sample_rate: 16_000,
            orig_len: None,
        };
        let y = istft(&s, &p).unwrap();
        assert_eq!(y.len(), 64);
        let c = 1.0 / p.n_fft as f64;
        let w = hann_window(p.win);
        for n in 0..p.win {
            if w[n] * w[n] > 1e-10 {
                assert!((y.samples[n] * w[n] - c).abs() < 1e-12, "sample {n}");
            } else {
                assert_eq!(y.samples[n], 0.0);
            }
        }
    }

    #[test]
    fn stft_linearity() {
        let p = FftParams::new(256, 64, 256).unwrap();
        let x = random_wave(1000, 11, 16_000);
        let y = random_wave(1000, 12, 16_000);
        let (a, b) = (0.7, -1.3);
        let mixed = Waveform::new(
            x.samples
                .iter()
                .zip(y.samples.iter())
                .map(|(xi, yi)| a * xi + b * yi)
                .collect(),
            16_000,
            "mix",
        );
        let sx = stft(&x, &p).unwrap();
        let sy = stft(&y, &p).unwrap();
        let sm = stft(&mixed, &p).unwrap();
        for ((f, k), v) in sm.re.indexed_iter() {
            assert!((v - (a * sx.re[[f, k]] + b * sy.re[[f, k]])).abs() < 1e-9);
        }
        for ((f, k), v) in sm.im.indexed_iter() {
            assert!((v - (a * sx.im[[f, k]] + b * sy.im[[f, k]])).abs() < 1e-9);
        }
    }

    /// Scalar probe: L = sum of (re * c1 + im * c2) over all bins, a linear
    /// functional with known gradient; checks the adjoint against central
    /// finite differences on a small configuration.
    #[test]
    fn stft_vjp_matches_finite_differences() {
        let p = FftParams::new(64, 16, 64).unwrap();
        let x = random_wave(256, 21, 16_000);
        let s = stft(&x, &p).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let c1 = Array2::from_shape_fn(s.re.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let c2 = Array2::from_shape_fn(s.im.raw_dim(), |_| rng.random_range(-1.0..1.0));

        let loss = |w: &Waveform| -> f64 {
            let s = stft(w, &p).unwrap();
            (&s.re * &c1).sum() + (&s.im * &c2).sum()
        };
        let g = stft_vjp(&s, &c1, &c2);

        let h = 1e-6;
        for idx in [0usize, 5, 63, 128, 200, 255] {
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
    fn magnitude_vjp_matches_finite_differences() {
        let p = FftParams::new(64, 16, 64).unwrap();
        let x = random_wave(256, 31, 16_000);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let s0 = stft(&x, &p).unwrap();
        let c = Array2::from_shape_fn(s0.re.raw_dim(), |_| rng.random_range(-1.0..1.0));

        let loss = |w: &Waveform| -> f64 {
            let s = stft(w, &p).unwrap();
            (&magnitude(&s).bins * &c).sum()
        };
        let m = magnitude(&s0);
        let (d_re, d_im) = magnitude_vjp(&s0, &m, &c);
        let g = stft_vjp(&s0, &d_re, &d_im);

        let h = 1e-6;
        for idx in [3usize, 40, 100, 180, 250] {
            let mut xp = x.clone();
            xp.samples[idx] += h;
            let mut xm = x.clone();
            xm.samples[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-12);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs vjp {}", g[idx]);
        }
    }
}
