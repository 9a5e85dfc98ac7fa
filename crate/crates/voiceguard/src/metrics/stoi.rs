//! Short-time objective intelligibility.
//!
//! Classical recipe: resample both signals to 10 kHz, drop frames more than
//! 40 dB below the loudest clean frame, split into 15 one-third-octave bands
//! from 150 Hz, form 30-frame (384 ms) temporal envelope segments, and
//! average the clipped, normalized correlation between the clean and
//! degraded envelopes.
//!
//! Two paths share the pipeline: the metric keeps the hard clipping; the
//! loss replaces it with a smooth min so an exact gradient with respect to
//! the degraded waveform exists everywhere. The silent-frame selection is
//! driven by the clean signal only, so it is a constant linear selection as
//! far as the degraded signal is concerned.

use rustfft::num_complex::Complex;

use crate::dsp::{hann_window, resample_ratio, resample_ratio_vjp, Waveform};
use crate::error::{Error, Result};

pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const N_FFT: usize = 512;
const N_BANDS: usize = 15;
const LOWEST_CF: f64 = 150.0;
/// Frames per temporal envelope segment (384 ms at 10 kHz).
const SEG: usize = 30;
const VAD_RANGE_DB: f64 = 40.0;
/// Signal-to-distortion clipping bound: -15 dB.
const CLIP_FACTOR: f64 = 6.6234132519034704; // 1 + 10^(15/20)
/// Corner softening for the smooth-min clip on the loss path.
const SMOOTH_KAPPA: f64 = 1e-6;

/// One-third-octave band edges as FFT bin ranges (inclusive start, exclusive
/// end) for the 512-point transform at 10 kHz.
fn band_bins() -> Vec<(usize, usize)> {
    let bin_hz = STOI_RATE as f64 / N_FFT as f64;
    (0..N_BANDS)
        .map(|j| {
            let cf = LOWEST_CF * 2f64.powf(j as f64 / 3.0);
            let lo = cf / 2f64.powf(1.0 / 6.0);
            let hi = cf * 2f64.powf(1.0 / 6.0);
            let lo_bin = (lo / bin_hz).ceil() as usize;
            let hi_bin = ((hi / bin_hz).ceil() as usize).min(N_FFT / 2 + 1);
            (lo_bin.max(1), hi_bin)
        })
        .collect()
}

fn frame_count(len: usize) -> usize {
    if len < FRAME {
        0
    } else {
        (len - FRAME) / HOP + 1
    }
}

/// Overlap-add the selected (windowed) frames back into a shorter signal.
fn reassemble(signal: &[f64], kept: &[usize], window: &[f64]) -> Vec<f64> {
    if kept.is_empty() {
        return Vec::new();
    }
    let out_len = (kept.len() - 1) * HOP + FRAME;
    let mut out = vec![0.0; out_len];
    for (k, &f) in kept.iter().enumerate() {
        for n in 0..FRAME {
            out[k * HOP + n] += window[n] * signal[f * HOP + n];
        }
    }
    out
}

fn reassemble_vjp(g_out: &[f64], kept: &[usize], window: &[f64], src_len: usize) -> Vec<f64> {
    let mut g = vec![0.0; src_len];
    for (k, &f) in kept.iter().enumerate() {
        for n in 0..FRAME {
            g[f * HOP + n] += window[n] * g_out[k * HOP + n];
        }
    }
    g
}

struct EnvelopeState {
    /// Complex spectra per frame, `frames x (N_FFT/2 + 1)`.
    spectra: Vec<Vec<Complex<f64>>>,
    /// Band envelopes, `bands x frames`.
    env: Vec<Vec<f64>>,
}

/// Windowed 512-point spectra and one-third-octave band envelopes.
fn envelopes(signal: &[f64], window: &[f64], bands: &[(usize, usize)]) -> EnvelopeState {
    let frames = frame_count(signal.len());
    let fft = {
        let mut planner = rustfft::FftPlanner::new();
        planner.plan_fft_forward(N_FFT)
    };
    let mut spectra = Vec::with_capacity(frames);
    let mut env = vec![vec![0.0; frames]; bands.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for m in 0..frames {
        for n in 0..N_FFT {
            let v = if n < FRAME {
                signal[m * HOP + n] * window[n]
            } else {
                0.0
            };
            buf[n] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let spec: Vec<Complex<f64>> = buf[..N_FFT / 2 + 1].to_vec();
        for (j, &(lo, hi)) in bands.iter().enumerate() {
            let e: f64 = spec[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            env[j][m] = e.sqrt();
        }
        spectra.push(spec);
    }
    EnvelopeState { spectra, env }
}

fn smooth_min(a: f64, b: f64) -> f64 {
    0.5 * (a + b - ((a - b) * (a - b) + SMOOTH_KAPPA * SMOOTH_KAPPA).sqrt())
}

fn smooth_min_da(a: f64, b: f64) -> f64 {
    0.5 * (1.0 - (a - b) / ((a - b) * (a - b) + SMOOTH_KAPPA * SMOOTH_KAPPA).sqrt())
}

/// Whole retained pipeline state for one clean/degraded pair.
pub struct StoiPipeline {
    ratio: f64,
    src_len: usize,
    kept: Vec<usize>,
    window: Vec<f64>,
    deg10_len: usize,
    deg_state: EnvelopeState,
    clean_env: Vec<Vec<f64>>,
    n_frames: usize,
    smooth: bool,
    score: f64,
}

impl StoiPipeline {
    pub fn run(clean: &Waveform, degraded: &Waveform, smooth: bool) -> Result<Self> {
        if clean.len() != degraded.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} samples", clean.len()),
                got: format!("{} samples", degraded.len()),
            });
        }
        if clean.sample_rate != degraded.sample_rate {
            return Err(Error::ParamMismatch(
                "stoi inputs must share a sample rate".into(),
            ));
        }
        let ratio = STOI_RATE as f64 / clean.sample_rate as f64;
        let c10 = resample_ratio(clean, ratio, STOI_RATE);
        let d10 = resample_ratio(degraded, ratio, STOI_RATE);
        let window = hann_window(FRAME);

        // Energy VAD on the clean signal decides which frames survive.
        let frames = frame_count(c10.len());
        let mut energies = Vec::with_capacity(frames);
        for m in 0..frames {
            let e: f64 = (0..FRAME)
                .map(|n| {
                    let v = c10.samples[m * HOP + n] * window[n];
                    v * v
                })
                .sum();
            energies.push(e);
        }
        let peak = energies.iter().cloned().fold(0.0f64, f64::max);
        let threshold = peak * 10f64.powf(-VAD_RANGE_DB / 10.0);
        let kept: Vec<usize> = (0..frames).filter(|&m| energies[m] > threshold).collect();

        let c_kept = reassemble(&c10.samples, &kept, &window);
        let d_kept = reassemble(&d10.samples, &kept, &window);
        let n_frames = frame_count(c_kept.len());
        if n_frames < SEG {
            let got_ms = c_kept.len() as f64 / STOI_RATE as f64 * 1000.0;
            return Err(Error::StoiTooShort {
                got_ms,
                need_ms: 384.0,
            });
        }

        let bands = band_bins();
        let clean_state = envelopes(&c_kept, &window, &bands);
        let deg_state = envelopes(&d_kept, &window, &bands);

        let mut total = 0.0;
        let mut count = 0usize;
        for j in 0..N_BANDS {
            for m in (SEG - 1)..n_frames {
                let x = &clean_state.env[j][m + 1 - SEG..=m];
                let y = &deg_state.env[j][m + 1 - SEG..=m];
                total += segment_correlation(x, y, smooth).0;
                count += 1;
            }
        }
        let score = total / count as f64;
        Ok(Self {
            ratio,
            src_len: degraded.len(),
            kept,
            window,
            deg10_len: d10.len(),
            deg_state,
            clean_env: clean_state.env,
            n_frames,
            smooth,
            score,
        })
    }

    /// Raw mean correlation (the metric clamps this to [0, 1]).
    pub fn score(&self) -> f64 {
        self.score
    }

    /// Gradient of the mean correlation with respect to the degraded source
    /// samples. Only meaningful on the smooth path.
    pub fn backward(&self) -> Vec<f64> {
        let count = (N_BANDS * (self.n_frames - (SEG - 1))) as f64;
        let upstream = 1.0 / count;

        // Accumulate gradient over the degraded band envelopes.
        let mut g_env = vec![vec![0.0; self.n_frames]; N_BANDS];
        for j in 0..N_BANDS {
            for m in (SEG - 1)..self.n_frames {
                let x = &self.clean_env[j][m + 1 - SEG..=m];
                let y = &self.deg_state.env[j][m + 1 - SEG..=m];
                let (_, grad) = segment_correlation(x, y, self.smooth);
                if let Some(gy) = grad {
                    for (i, g) in gy.iter().enumerate() {
                        g_env[j][m + 1 - SEG + i] += upstream * g;
                    }
                }
            }
        }

        // Envelope -> complex spectra -> windowed frames of the reassembled
        // degraded signal.
        let bands = band_bins();
        let ifft = {
            let mut planner = rustfft::FftPlanner::new();
            planner.plan_fft_inverse(N_FFT)
        };
        let kept_len = (self.kept.len() - 1) * HOP + FRAME;
        let mut g_kept = vec![0.0; kept_len];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        for m in 0..self.n_frames {
            for c in buf.iter_mut() {
                *c = Complex::new(0.0, 0.0);
            }
            let mut any = false;
            for (j, &(lo, hi)) in bands.iter().enumerate() {
                let ge = g_env[j][m];
                if ge == 0.0 {
                    continue;
                }
                let env = self.deg_state.env[j][m];
                if env <= 0.0 {
                    continue;
                }
                // d env / d |S_k|^2 = 1 / (2 env)
                let scale = ge * 0.5 / env;
                for k in lo..hi {
                    let s = self.deg_state.spectra[m][k];
                    buf[k] += Complex::new(2.0 * scale * s.re, 2.0 * scale * s.im);
                    any = true;
                }
            }
            if !any {
                continue;
            }
            ifft.process(&mut buf);
            for n in 0..FRAME {
                g_kept[m * HOP + n] += self.window[n] * buf[n].re;
            }
        }

        // Undo the silent-frame reassembly and the resampling.
        let g_d10 = reassemble_vjp(&g_kept, &self.kept, &self.window, self.deg10_len);
        resample_ratio_vjp(&g_d10, self.src_len, self.ratio)
    }
}

/// Correlation of one envelope segment after normalization and clipping.
/// Returns the correlation and, on request, its gradient with respect to the
/// raw degraded envelope values.
fn segment_correlation(x: &[f64], y: &[f64], smooth: bool) -> (f64, Option<Vec<f64>>) {
    let n = x.len();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ny == 0.0 || nx == 0.0 {
        // Fully silent segment: defined as zero correlation, zero gradient.
        return (0.0, None);
    }
    let alpha = nx / ny;
    let ybar: Vec<f64> = y.iter().map(|v| alpha * v).collect();
    let clipped: Vec<f64> = ybar
        .iter()
        .zip(x.iter())
        .map(|(&yb, &xi)| {
            let bound = CLIP_FACTOR * xi;
            if smooth {
                smooth_min(yb, bound)
            } else {
                yb.min(bound)
            }
        })
        .collect();

    let mean_x = x.iter().sum::<f64>() / n as f64;
    let mean_c = clipped.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut sx = 0.0;
    let mut sc = 0.0;
    for i in 0..n {
        let dx = x[i] - mean_x;
        let dc = clipped[i] - mean_c;
        num += dx * dc;
        sx += dx * dx;
        sc += dc * dc;
    }
    if sx == 0.0 || sc == 0.0 {
        return (0.0, None);
    }
    let dx_norm = sx.sqrt();
    let dc_norm = sc.sqrt();
    let corr = num / (dx_norm * dc_norm);

    if !smooth {
        return (corr, None);
    }

    // d corr / d clipped_i, through the centering.
    let mut u = vec![0.0; n];
    for i in 0..n {
        let dx = x[i] - mean_x;
        let dc = clipped[i] - mean_c;
        u[i] = dx / (dx_norm * dc_norm) - corr * dc / sc;
    }
    let mean_u = u.iter().sum::<f64>() / n as f64;
    // d corr / d ybar_i via the smooth clip.
    let mut g_ybar = vec![0.0; n];
    for i in 0..n {
        let g_clip = u[i] - mean_u;
        g_ybar[i] = g_clip * smooth_min_da(ybar[i], CLIP_FACTOR * x[i]);
    }
    // ybar = alpha * y with alpha = nx / ny.
    let dot_gy: f64 = g_ybar.iter().zip(y.iter()).map(|(g, v)| g * v).sum();
    let mut g_y = vec![0.0; n];
    for i in 0..n {
        let dalpha_dyi = -nx / (ny * ny) * (y[i] / ny);
        g_y[i] = alpha * g_ybar[i] + dot_gy * dalpha_dyi;
    }
    (corr, Some(g_y))
}

/// Classical STOI score in [0, 1]; exactly 1 on identical inputs.
pub fn stoi_score(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    let p = StoiPipeline::run(clean, degraded, false)?;
    Ok(p.score().clamp(0.0, 1.0))
}

/// Differentiable intelligibility penalty `1 - stoi` and its gradient with
/// respect to the degraded samples (smooth clipping on this path only).
pub fn stoi_loss_grad(clean: &Waveform, degraded: &Waveform) -> Result<(f64, Vec<f64>)> {
    let p = StoiPipeline::run(clean, degraded, true)?;
    let g = p.backward();
    Ok((1.0 - p.score(), g.iter().map(|v| -v).collect()))
}
