//! Evaluation metrics: MCD with DTW alignment, SNR, speaker similarity with
//! the 0.25 cloning threshold, STOI, and WER via an optional external ASR
//! service.

mod asr;
mod stoi;

pub use asr::{wer_via_asr, AsrClientConfig, WerOutcome};
pub use stoi::{stoi_loss_grad, stoi_score, StoiPipeline, STOI_RATE};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    mel_spectrogram, mfcc_from_logmel, FftParams, MelParams, MelSpectrogram, MfccSequence,
    Waveform, MFCC_COEFFS,
};
use crate::error::{Error, Result};

/// Speaker-similarity threshold above which a clone counts as successful.
pub const SIM_THRESHOLD: f64 = 0.25;
/// MCD scale constant: (10 / ln 10) * sqrt(2).
pub const MCD_COEF: f64 = 6.141851463713754;
const VAD_RANGE_DB: f64 = 40.0;
const MIN_VOICED_FRAMES: usize = 10;

/// Mel-cepstral distortion with DTW alignment.
///
/// Dynamic time warping over `{(1,0),(0,1),(1,1)}` steps minimizes the total
/// Euclidean distance between 13-dim cepstral frames (c0 excluded); the
/// reported value is the per-node mean over the optimal path scaled by
/// [`MCD_COEF`].
pub fn mcd_dtw(a: &MfccSequence, b: &MfccSequence) -> Result<f64> {
    let (na, nb) = (a.frames(), b.frames());
    if na == 0 || nb == 0 {
        return Err(Error::EmptyInput("mcd_dtw on empty sequence".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        let ra = a.coeffs.row(i);
        let rb = b.coeffs.row(j);
        ra.iter()
            .zip(rb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };

    let mut acc = Array2::zeros((na, nb));
    // 0 = diagonal, 1 = up (i-1), 2 = left (j-1); diagonal wins ties.
    let mut step = Array2::zeros((na, nb));
    for i in 0..na {
        for j in 0..nb {
            let d = dist(i, j);
            let (best, from) = match (i, j) {
                (0, 0) => (0.0, 3u8),
                (0, _) => (acc[[0, j - 1]], 2),
                (_, 0) => (acc[[i - 1, 0]], 1),
                _ => {
                    let diag = acc[[i - 1, j - 1]];
                    let up = acc[[i - 1, j]];
                    let left = acc[[i, j - 1]];
                    if diag <= up && diag <= left {
                        (diag, 0)
                    } else if up <= left {
                        (up, 1)
                    } else {
                        (left, 2)
                    }
                }
            };
            acc[[i, j]] = d + best;
            step[[i, j]] = from;
        }
    }

    // Path length by backtracking.
    let (mut i, mut j) = (na - 1, nb - 1);
    let mut nodes = 1usize;
    loop {
        match step[[i, j]] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            2 => j -= 1,
            _ => break,
        }
        nodes += 1;
    }
    Ok(MCD_COEF * acc[[na - 1, nb - 1]] / nodes as f64)
}

/// MCD between two log-mel spectrograms via their cepstra.
pub fn mcd_dtw_from_logmel(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    mcd_dtw(&mfcc_from_logmel(a), &mfcc_from_logmel(b))
}

/// Signal-to-noise ratio of a perturbation against its carrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snr {
    pub db: f64,
    /// Set when the perturbation was exactly zero (the ratio is infinite).
    pub delta_silent: bool,
}

/// `10 log10(sum x^2 / sum delta^2)`. A zero perturbation yields an infinite
/// sentinel with `delta_silent`; a zero signal is an error.
pub fn snr_db(x: &Waveform, delta: &[f64]) -> Result<Snr> {
    if x.len() != delta.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", x.len()),
            got: format!("{} samples", delta.len()),
        });
    }
    let sig: f64 = x.samples.iter().map(|v| v * v).sum();
    if sig == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let noise: f64 = delta.iter().map(|v| v * v).sum();
    if noise == 0.0 {
        return Ok(Snr {
            db: f64::INFINITY,
            delta_silent: true,
        });
    }
    Ok(Snr {
        db: 10.0 * (sig / noise).log10(),
        delta_silent: false,
    })
}

/// Voice statistics embedding: mean and standard deviation of the 13 MFCCs
/// and of their deltas over voiced frames (52 values), z-normalized against
/// a fixed calibration population of synthetic voices. A desk-scale stand-in
/// for a neural speaker encoder; it only has to order same-speaker against
/// cross-speaker similarity. Without the normalization, the spectral shape
/// every voiced clip shares dominates the cosine and all scores saturate
/// near 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
}

/// Per-dimension mean and scale of raw embeddings over a fixed population of
/// generated voices (score normalization, computed once per process).
fn calibration() -> &'static Vec<(f64, f64)> {
    use std::sync::OnceLock;
    static CAL: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    CAL.get_or_init(|| {
        const CAL_SEED: u64 = 0xCA11B7A7E;
        const CAL_VOICES: usize = 16;
        let raws: Vec<Vec<f64>> = (0..CAL_VOICES)
            .map(|v| {
                let clip = crate::synth::generate_clip(CAL_SEED, v, 0, 16_000);
                let mel = mel_spectrogram(
                    &clip,
                    &FftParams::default(),
                    &MelParams::default_for(clip.sample_rate),
                )
                .expect("calibration clip transforms");
                let mfcc = mfcc_from_logmel(&mel);
                let mask = voiced_mask(&mel);
                SpeakerEmbedding::raw_stats(&mfcc, &mask).expect("calibration embedding")
            })
            .collect();
        let dims = raws[0].len();
        (0..dims)
            .map(|d| {
                let mean = raws.iter().map(|r| r[d]).sum::<f64>() / raws.len() as f64;
                let var = raws.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>()
                    / raws.len() as f64;
                (mean, var.sqrt().max(1e-6))
            })
            .collect()
    })
}

/// Voiced-frame mask from log-mel frame energies: frames within 40 dB of the
/// loudest frame.
fn voiced_mask(mel: &MelSpectrogram) -> Vec<bool> {
    let energies: Vec<f64> = (0..mel.frames())
        .map(|f| mel.bins.row(f).mapv(f64::exp).sum())
        .collect();
    let peak = energies.iter().cloned().fold(0.0f64, f64::max);
    let threshold = peak * 10f64.powf(-VAD_RANGE_DB / 10.0);
    energies.iter().map(|e| *e > threshold).collect()
}

impl SpeakerEmbedding {
    pub fn from_logmel(mel: &MelSpectrogram) -> Result<Self> {
        let mfcc = mfcc_from_logmel(mel);
        let mask = voiced_mask(mel);
        Self::from_mfcc_masked(&mfcc, &mask)
    }

    pub fn from_waveform(x: &Waveform) -> Result<Self> {
        let mel = mel_spectrogram(
            x,
            &FftParams::default(),
            &MelParams::default_for(x.sample_rate),
        )?;
        Self::from_logmel(&mel)
    }

    fn from_mfcc_masked(mfcc: &MfccSequence, mask: &[bool]) -> Result<Self> {
        let raw = Self::raw_stats(mfcc, mask)?;
        let vector = raw
            .iter()
            .zip(calibration().iter())
            .map(|(v, (mean, sd))| (v - mean) / sd)
            .collect();
        Ok(Self { vector })
    }

    /// Unnormalized statistics vector; also feeds the calibration itself.
    fn raw_stats(mfcc: &MfccSequence, mask: &[bool]) -> Result<Vec<f64>> {
        let voiced: Vec<usize> = (0..mfcc.frames()).filter(|f| mask[*f]).collect();
        if voiced.len() < MIN_VOICED_FRAMES {
            return Err(Error::InsufficientVoiced {
                got: voiced.len(),
                need: MIN_VOICED_FRAMES,
            });
        }
        let k = mfcc.coeffs.ncols();
        let n = voiced.len();
        // Deltas over the voiced subsequence: central differences, one-sided
        // at the ends.
        let coef = |f: usize, c: usize| mfcc.coeffs[[voiced[f], c]];
        let delta = |f: usize, c: usize| -> f64 {
            if n == 1 {
                0.0
            } else if f == 0 {
                coef(1, c) - coef(0, c)
            } else if f == n - 1 {
                coef(n - 1, c) - coef(n - 2, c)
            } else {
                (coef(f + 1, c) - coef(f - 1, c)) / 2.0
            }
        };
        let mut vector = Vec::with_capacity(4 * k);
        let stats = |values: &dyn Fn(usize) -> f64| -> (f64, f64) {
            let mean = (0..n).map(values).sum::<f64>() / n as f64;
            let var = (0..n).map(|f| (values(f) - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        for c in 0..k {
            let (mean, _) = stats(&|f| coef(f, c));
            vector.push(mean);
        }
        for c in 0..k {
            let (_, sd) = stats(&|f| coef(f, c));
            vector.push(sd);
        }
        for c in 0..k {
            let (mean, _) = stats(&|f| delta(f, c));
            vector.push(mean);
        }
        for c in 0..k {
            let (_, sd) = stats(&|f| delta(f, c));
            vector.push(sd);
        }
        debug_assert_eq!(vector.len(), 4 * MFCC_COEFFS.min(k));
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::EmptyInput("non-finite embedding".into()));
        }
        Ok(vector)
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self
            .vector
            .iter()
            .zip(other.vector.iter())
            .map(|(a, b)| a * b)
            .sum();
        let na: f64 = self.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = other.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity of the speaker embeddings of two waveforms.
pub fn speaker_sim(a: &Waveform, b: &Waveform) -> Result<f64> {
    let ea = SpeakerEmbedding::from_waveform(a)?;
    let eb = SpeakerEmbedding::from_waveform(b)?;
    Ok(ea.cosine(&eb))
}

/// Speaker similarity in the mel domain (used to score synthesized
/// spectrograms against ground truth without a vocoder).
pub fn speaker_sim_from_logmel(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    let ea = SpeakerEmbedding::from_logmel(a)?;
    let eb = SpeakerEmbedding::from_logmel(b)?;
    Ok(ea.cosine(&eb))
}

/// Percentage of similarity scores above the cloning threshold.
pub fn attack_success_rate(sims: &[f64]) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::EmptyInput("attack_success_rate of nothing".into()));
    }
    let hits = sims.iter().filter(|s| **s > SIM_THRESHOLD).count();
    Ok(100.0 * hits as f64 / sims.len() as f64)
}

/// Word error rate in percent: word-level Levenshtein distance over the
/// reference length. Insertions can push it above 100.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return if h.is_empty() { 0.0 } else { 100.0 };
    }
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0usize; h.len() + 1];
    for i in 1..=r.len() {
        cur[0] = i;
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(!r[i - 1].eq_ignore_ascii_case(h[j - 1]));
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    100.0 * prev[h.len()] as f64 / r.len() as f64
}

/// Bundle of the per-clip evaluation metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mcd: f64,
    pub snr_db: f64,
    pub sim: f64,
    pub stoi: f64,
    pub wer_pct: Option<f64>,
    pub attack_success: bool,
}

impl MetricReport {
    /// The success flag is derived, never stored independently.
    pub fn new(mcd: f64, snr_db: f64, sim: f64, stoi: f64, wer_pct: Option<f64>) -> Self {
        Self {
            mcd,
            snr_db,
            sim,
            stoi,
            wer_pct,
            attack_success: sim > SIM_THRESHOLD,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::CANONICAL_RATE;

    fn seq(rows: Vec<Vec<f64>>) -> MfccSequence {
        let r = rows.len();
        let c = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        MfccSequence {
            coeffs: Array2::from_shape_vec((r, c), flat).unwrap(),
        }
    }

    /// Harmonic tone burst with a clear voiced/silent structure.
    fn voiced_clip(f0: f64, len: usize) -> Waveform {
        let samples: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 / CANONICAL_RATE as f64;
                let gate = if (t * 2.0).fract() < 0.7 { 1.0 } else { 0.02 };
                let mut v = 0.0;
                for h in 1..=6 {
                    v += (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64;
                }
                0.25 * gate * v
            })
            .collect();
        Waveform::new(samples, CANONICAL_RATE, "voiced")
    }

    #[test]
    fn mcd_zero_on_identical() {
        let a = seq(vec![vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 2.0]]);
        assert_eq!(mcd_dtw(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mcd_unit_vector_single_frames() {
        let a = seq(vec![vec![0.0; 13]]);
        let mut row = vec![0.0; 13];
        row[4] = 1.0;
        let b = seq(vec![row]);
        let got = mcd_dtw(&a, &b).unwrap();
        assert!((got - MCD_COEF).abs() < 1e-12);
        assert!((got - 6.1419).abs() < 1e-4);
    }

    #[test]
    fn mcd_symmetric_and_rejects_empty() {
        let a = seq(vec![vec![1.0, 0.0], vec![2.0, 1.0], vec![0.0, 0.5]]);
        let b = seq(vec![vec![0.5, 0.2], vec![1.5, -0.5]]);
        let ab = mcd_dtw(&a, &b).unwrap();
        let ba = mcd_dtw(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let empty = MfccSequence {
            coeffs: Array2::zeros((0, 13)),
        };
        assert!(mcd_dtw(&a, &empty).is_err());
    }

    #[test]
    fn snr_formula_and_laws() {
        let x = Waveform::new(vec![1.0; 1000], CANONICAL_RATE, "x");
        let delta = vec![0.1; 1000];
        let snr = snr_db(&x, &delta).unwrap();
        assert!((snr.db - 20.0).abs() < 1e-9);

        // delta = x gives 0 dB.
        let snr0 = snr_db(&x, &x.samples).unwrap();
        assert!(snr0.db.abs() < 1e-12);

        // Scaling delta by 10 lowers SNR by 20 dB (a decade).
        let tenfold: Vec<f64> = delta.iter().map(|v| v * 10.0).collect();
        let snr10 = snr_db(&x, &tenfold).unwrap();
        assert!((snr.db - snr10.db - 20.0).abs() < 1e-9);

        // Sentinels.
        let silent = snr_db(&x, &vec![0.0; 1000]).unwrap();
        assert!(silent.delta_silent && silent.db.is_infinite());
        let zeros = Waveform::new(vec![0.0; 1000], CANONICAL_RATE, "z");
        assert!(matches!(snr_db(&zeros, &delta), Err(Error::ZeroSignal)));
    }

    #[test]
    fn attack_rate_counts_threshold() {
        assert!((attack_success_rate(&[0.3, 0.2, 0.26]).unwrap() - 66.66666666666667).abs() < 1e-9);
        assert_eq!(attack_success_rate(&[0.1, 0.25, 0.0]).unwrap(), 0.0);
        assert_eq!(attack_success_rate(&[0.3, 0.9]).unwrap(), 100.0);
        assert!(attack_success_rate(&[]).is_err());
    }

    #[test]
    fn wer_hand_cases() {
        assert_eq!(wer("a b c", "a b c"), 0.0);
        assert!((wer("a b c", "a x c d") - 66.66666666666667).abs() < 1e-9);
        assert_eq!(wer("a b c", ""), 100.0);
        // Insertions can exceed 100 percent.
        assert!(wer("a", "x y z") > 100.0);
    }

    #[test]
    fn report_flag_is_consistent() {
        let r = MetricReport::new(5.0, 20.0, 0.3, 0.9, None);
        assert!(r.attack_success);
        let r2 = MetricReport::new(5.0, 20.0, 0.25, 0.9, None);
        assert!(!r2.attack_success);
    }

    #[test]
    fn mcd_toy_matches_brute_force_enumeration() {
        // Exhaustive oracle over all monotone paths for small sequences.
        fn enumerate(a: &MfccSequence, b: &MfccSequence) -> f64 {
            let d = |i: usize, j: usize| -> f64 {
                a.coeffs
                    .row(i)
                    .iter()
                    .zip(b.coeffs.row(j).iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            let (na, nb) = (a.frames(), b.frames());
            let mut best: Option<(f64, usize)> = None;
            // Depth-first over steps, accumulating in path order exactly as
            // the DP does.
            fn walk(
                i: usize,
                j: usize,
                total: f64,
                nodes: usize,
                na: usize,
                nb: usize,
                d: &dyn Fn(usize, usize) -> f64,
                best: &mut Option<(f64, usize)>,
            ) {
                if i == na - 1 && j == nb - 1 {
                    if best.is_none() || total < best.unwrap().0 {
                        *best = Some((total, nodes));
                    }
                    return;
                }
                if i + 1 < na && j + 1 < nb {
                    walk(i + 1, j + 1, d(i + 1, j + 1) + total, nodes + 1, na, nb, d, best);
                }
                if i + 1 < na {
                    walk(i + 1, j, d(i + 1, j) + total, nodes + 1, na, nb, d, best);
                }
                if j + 1 < nb {
                    walk(i, j + 1, d(i, j + 1) + total, nodes + 1, na, nb, d, best);
                }
            }
            walk(0, 0, d(0, 0), 1, na, nb, &d, &mut best);
            let (total, nodes) = best.unwrap();
            MCD_COEF * total / nodes as f64
        }

        let a = seq(vec![
            vec![0.2, 1.0],
            vec![1.4, -0.3],
            vec![0.9, 0.9],
        ]);
        let b = seq(vec![
            vec![0.1, 1.1],
            vec![1.0, 0.0],
            vec![1.2, 0.7],
        ]);
        assert_eq!(mcd_dtw(&a, &b).unwrap(), enumerate(&a, &b));
    }

    #[test]
    fn cosine_properties() {
        let e1 = SpeakerEmbedding {
            vector: vec![1.0, 2.0, 3.0],
        };
        let e2 = SpeakerEmbedding {
            vector: vec![-1.0, 0.5, 2.0],
        };
        assert!((e1.cosine(&e1) - 1.0).abs() < 1e-12);
        assert!((e1.cosine(&e2) - e2.cosine(&e1)).abs() < 1e-15);
    }

    #[test]
    fn speaker_sim_identity_and_symmetry() {
        let x = voiced_clip(130.0, 16_000);
        let y = voiced_clip(210.0, 16_000);
        assert!((speaker_sim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let ab = speaker_sim(&x, &y).unwrap();
        let ba = speaker_sim(&y, &x).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn insufficient_voiced_rejected() {
        // 1200 samples -> 5 frames, below the 10-voiced-frame floor.
        let x = voiced_clip(130.0, 1200);
        assert!(matches!(
            SpeakerEmbedding::from_waveform(&x),
            Err(Error::InsufficientVoiced { .. })
        ));
    }
}
