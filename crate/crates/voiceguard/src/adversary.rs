//! The adaptive-attacker toolbox: perturbation-removal transforms, data
//! augmentations, adversarial counter-perturbation, and black-box recovery.
//!
//! Everything here models what a capable adversary would do to protected
//! audio before (or instead of) training on it. Augmentations are total on
//! valid inputs and deterministic given their seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{
    biquad_filter, istft, magnitude, mel_filterbank, mel_spectrogram, resample, resample_ratio,
    stft, FftParams, FilterKind, MelParams, Waveform,
};
use crate::error::{Error, Result};
use crate::objectives::{total_loss, LossWeights, NoiseReference};
use crate::surrogate::{CondEmbedding, SurrogateModel};

/// One audio transformation an adversary may apply to protected audio.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AugmentationSpec {
    /// Down-sample to an intermediate rate and back (RS).
    Resample { intermediate_hz: u32 },
    /// Mel-spectrogram extraction and phase-free inversion (Mel).
    MelInversion { iterations: usize },
    /// Quantize-dequantize at the given bit depth (QD).
    Quantize { bits: u32 },
    /// Telephone-style band filter (FL).
    BandFilter { low_hz: f64, high_hz: f64 },
    /// Resample-based speed change; the clip length changes.
    Speed { factor: f64 },
    /// Zero a random span (seeded).
    TimeMask { span_ms: f64, seed: u64 },
    /// Low-pass filter (LPF).
    Lowpass { cutoff_hz: f64 },
}

impl AugmentationSpec {
    /// Short row label for reports.
    pub fn label(&self) -> String {
        match self {
            Self::Resample { .. } => "rs".into(),
            Self::MelInversion { .. } => "mel".into(),
            Self::Quantize { .. } => "qd".into(),
            Self::BandFilter { .. } => "fl".into(),
            Self::Speed { factor } => format!("speed{factor}"),
            Self::TimeMask { .. } => "mask".into(),
            Self::Lowpass { .. } => "lpf".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            Self::Resample { intermediate_hz } => {
                if !crate::dsp::SUPPORTED_RATES.contains(&intermediate_hz) {
                    return bad(format!("unsupported intermediate rate {intermediate_hz}"));
                }
            }
            Self::MelInversion { iterations } => {
                if iterations == 0 || iterations > 1000 {
                    return bad(format!("mel inversion iterations {iterations} outside 1..=1000"));
                }
            }
            Self::Quantize { bits } => {
                if !(2..=16).contains(&bits) {
                    return bad(format!("quantize bits {bits} outside 2..=16"));
                }
            }
            Self::BandFilter { low_hz, high_hz } => {
                if low_hz <= 0.0 || high_hz <= low_hz {
                    return bad(format!("band {low_hz}..{high_hz} invalid"));
                }
            }
            Self::Speed { factor } => {
                if !(0.5..=2.0).contains(&factor) {
                    return bad(format!("speed factor {factor} outside 0.5..=2.0"));
                }
            }
            Self::TimeMask { span_ms, .. } => {
                if span_ms <= 0.0 {
                    return bad("mask span must be positive".into());
                }
            }
            Self::Lowpass { cutoff_hz } => {
                if cutoff_hz <= 0.0 {
                    return bad("cutoff must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// The four defense-style transforms (RS, Mel, QD, FL) with defaults.
    pub fn defense_suite() -> Vec<Self> {
        vec![
            Self::Resample {
                intermediate_hz: 8000,
            },
            Self::MelInversion { iterations: 32 },
            Self::Quantize { bits: 8 },
            Self::BandFilter {
                low_hz: 300.0,
                high_hz: 3400.0,
            },
        ]
    }

    /// The transformation-style transforms (speed, mask, LPF) with defaults.
    pub fn transform_suite(seed: u64) -> Vec<Self> {
        vec![
            Self::Speed { factor: 0.9 },
            Self::Speed { factor: 1.1 },
            Self::TimeMask {
                span_ms: 100.0,
                seed,
            },
            Self::Lowpass { cutoff_hz: 4000.0 },
        ]
    }

    /// Defense plus transformation defaults.
    pub fn full_suite(seed: u64) -> Vec<Self> {
        let mut v = Self::defense_suite();
        v.extend(Self::transform_suite(seed));
        v
    }
}

/// Applies one augmentation. Speed changes the length; everything else
/// preserves it.
pub fn augment(x: &Waveform, spec: &AugmentationSpec) -> Result<Waveform> {
    spec.validate()?;
    match *spec {
        AugmentationSpec::Resample { intermediate_hz } => {
            let down = resample(x, intermediate_hz)?;
            let mut up = resample(&down, x.sample_rate)?;
            up.samples.resize(x.len(), 0.0);
            clamp_unit(&mut up);
            Ok(up)
        }
        AugmentationSpec::MelInversion { iterations } => mel_invert(x, iterations),
        AugmentationSpec::Quantize { bits } => {
            let scale = f64::from(1u32 << (bits - 1));
            Ok(Waveform::new(
                x.samples
                    .iter()
                    .map(|v| (v.clamp(-1.0, 1.0) * scale).round() / scale)
                    .map(|v| v.clamp(-1.0, 1.0))
                    .collect(),
                x.sample_rate,
                x.id.clone(),
            ))
        }
        AugmentationSpec::BandFilter { low_hz, high_hz } => {
            let mut y = biquad_filter(
                x,
                FilterKind::Bandpass {
                    low: low_hz,
                    high: high_hz,
                },
            )?;
            clamp_unit(&mut y);
            Ok(y)
        }
        AugmentationSpec::Speed { factor } => {
            Ok(resample_ratio(x, 1.0 / factor, x.sample_rate))
        }
        AugmentationSpec::TimeMask { span_ms, seed } => {
            let span = ((span_ms / 1000.0) * x.sample_rate as f64).round() as usize;
            let span = span.min(x.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start = if span >= x.len() {
                0
            } else {
                rng.random_range(0..=x.len() - span)
            };
            let mut samples = x.samples.clone();
            for s in samples.iter_mut().skip(start).take(span) {
                *s = 0.0;
            }
            Ok(Waveform::new(samples, x.sample_rate, x.id.clone()))
        }
        AugmentationSpec::Lowpass { cutoff_hz } => {
            let mut y = biquad_filter(x, FilterKind::Lowpass { cutoff: cutoff_hz })?;
            clamp_unit(&mut y);
            Ok(y)
        }
    }
}

fn clamp_unit(x: &mut Waveform) {
    for v in x.samples.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Mel extraction followed by Griffin–Lim-style inversion through the iSTFT.
fn mel_invert(x: &Waveform, iterations: usize) -> Result<Waveform> {
    let p = FftParams::default();
    let m = MelParams::default_for(x.sample_rate);
    let mel = mel_spectrogram(x, &p, &m)?;
    let fb = mel_filterbank(&p, &m, x.sample_rate);
    // Spread band energies back over bins (filterbank columns sum to one).
    let energies = mel.bins.mapv(f64::exp);
    let power = energies.dot(&fb);
    let target_mag = power.mapv(|v| v.max(0.0).sqrt());

    let frames = target_mag.nrows();
    let bins = target_mag.ncols();
    let mut phase = ndarray::Array2::<f64>::zeros((frames, bins));
    let mut out = None;
    for _ in 0..iterations {
        let spec = crate::dsp::ComplexSpectrogram {
            re: ndarray::Zip::from(&target_mag)
                .and(&phase)
                .map_collect(|m, p| m * p.cos()),
            im: ndarray::Zip::from(&target_mag)
                .and(&phase)
                .map_collect(|m, p| m * p.sin()),
            params: p,
            sample_rate: x.sample_rate,
            orig_len: Some(x.len()),
        };
        let y = istft(&spec, &p)?;
        let s = stft(&y, &p)?;
        phase = ndarray::Zip::from(&s.re)
            .and(&s.im)
            .map_collect(|re, im| im.atan2(*re));
        out = Some(y);
    }
    let mut y = out.expect("at least one iteration");
    clamp_unit(&mut y);
    y.id = x.id.clone();
    Ok(y)
}

/// STFT-domain noise gate. Per-band noise floors come from the quietest 10%
/// of frames; every time–frequency bin below
/// `max(band floor, global peak + gate_db)` is attenuated by 20 dB and the
/// signal is resynthesized at the original length.
pub fn spectral_gate_denoise(x: &Waveform, gate_db: f64) -> Result<Waveform> {
    let p = FftParams::default();
    if x.len() < p.win {
        // Gate on a sub-window clip is an identity.
        return Ok(x.clone());
    }
    let s = stft(x, &p)?;
    let mag = magnitude(&s);
    let frames = mag.bins.nrows();
    let bins = mag.bins.ncols();

    let mut order: Vec<usize> = (0..frames).collect();
    let frame_energy: Vec<f64> = (0..frames)
        .map(|f| mag.bins.row(f).iter().map(|v| v * v).sum())
        .collect();
    order.sort_by(|a, b| frame_energy[*a].partial_cmp(&frame_energy[*b]).unwrap());
    let quiet = &order[..(frames / 10).max(1)];

    let peak = mag.bins.iter().cloned().fold(0.0f64, f64::max);
    let gate_gain = 10f64.powf(-20.0 / 20.0);
    let peak_threshold = peak * 10f64.powf(gate_db / 20.0);

    let mut re = s.re.clone();
    let mut im = s.im.clone();
    for b in 0..bins {
        let floor: f64 = quiet.iter().map(|f| mag.bins[[*f, b]]).sum::<f64>() / quiet.len() as f64;
        let threshold = floor.max(peak_threshold);
        for f in 0..frames {
            if mag.bins[[f, b]] < threshold {
                re[[f, b]] *= gate_gain;
                im[[f, b]] *= gate_gain;
            }
        }
    }
    let gated = crate::dsp::ComplexSpectrogram {
        re,
        im,
        params: p,
        sample_rate: x.sample_rate,
        orig_len: Some(x.len()),
    };
    let mut y = istft(&gated, &p)?;
    y.id = x.id.clone();
    Ok(y)
}

/// Adversarial-training configuration: the attacker's perturbation radius
/// and ascent budget against a protection generated at `rho_u`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdvTrainConfig {
    pub rho_a: f64,
    pub rho_u: f64,
    pub steps: usize,
}

/// The paper-style sweep grid for the adversarial radius.
pub fn default_rho_grid() -> Vec<f64> {
    [0.0, 2.0, 4.0, 8.0, 10.0, 12.0, 16.0]
        .iter()
        .map(|v| v / 255.0)
        .collect()
}

/// Projected-gradient ascent on the protection objective within the `rho_a`
/// ball: the attacker's attempt to burn the perturbation out of the audio.
pub fn adversarial_counter_perturbation(
    x_prot: &Waveform,
    model: &SurrogateModel,
    cond: &CondEmbedding,
    cfg: &AdvTrainConfig,
) -> Result<Waveform> {
    if cfg.rho_a == 0.0 || cfg.steps == 0 {
        return Ok(x_prot.clone());
    }
    let noise = NoiseReference::for_clip(x_prot, 0x5eed, &model.fft, &model.mel)?;
    let w = LossWeights::default();
    let step = 2.5 * cfg.rho_a / cfg.steps as f64;

    // Signed-gradient ascent, keeping the best iterate: the landscape is a
    // sum of L1 kinks, so a late step can overshoot.
    let mut delta = vec![0.0f64; x_prot.len()];
    let mut best_delta = delta.clone();
    let mut best_loss = f64::NEG_INFINITY;
    for k in 0..=cfg.steps {
        let candidate = add_clamped(x_prot, &delta);
        let (loss, grad, _) = total_loss(x_prot, &candidate, model, cond, &noise, &w)?;
        if loss > best_loss {
            best_loss = loss;
            best_delta.copy_from_slice(&delta);
        }
        if k == cfg.steps {
            break;
        }
        for (d, g) in delta.iter_mut().zip(grad.iter()) {
            // Ascent: move with the gradient sign.
            *d = (*d + step * crate::objectives::l1_sign(*g)).clamp(-cfg.rho_a, cfg.rho_a);
        }
    }
    let mut y = add_clamped(x_prot, &best_delta);
    y.id = x_prot.id.clone();
    Ok(y)
}

fn add_clamped(x: &Waveform, delta: &[f64]) -> Waveform {
    Waveform::new(
        x.samples
            .iter()
            .zip(delta.iter())
            .map(|(a, d)| (a + d).clamp(-1.0, 1.0))
            .collect(),
        x.sample_rate,
        x.id.clone(),
    )
}

/// Score-only oracle for black-box recovery; no gradient access exists
/// through this interface.
pub trait BlackBoxScorer {
    fn score(&mut self, candidate: &Waveform) -> f64;
}

impl<F: FnMut(&Waveform) -> f64> BlackBoxScorer for F {
    fn score(&mut self, candidate: &Waveform) -> f64 {
        self(candidate)
    }
}

/// Which feedback channel the recovery adversary queries. The two channels
/// are exposed separately, never combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NesObjective {
    /// Query a speaker-recognition system for similarity to a reference.
    MaxSim,
    /// Push the audio back toward natural-sounding (low perception loss).
    MinPerceptionLoss,
}

/// Natural-evolution-strategies configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NesConfig {
    pub queries: usize,
    pub population: usize,
    pub sigma: f64,
    pub step: f64,
    pub objective: NesObjective,
    pub seed: u64,
}

impl Default for NesConfig {
    fn default() -> Self {
        Self {
            queries: 50_000,
            population: 50,
            sigma: 0.001,
            step: 0.0005,
            objective: NesObjective::MaxSim,
            seed: 0,
        }
    }
}

/// Black-box recovery: estimate ascent directions from scored antithetic
/// Gaussian probes, never touching a gradient. Returns the best-scoring
/// candidate seen within the query budget.
pub fn nes_recover(
    x_prot: &Waveform,
    cfg: &NesConfig,
    scorer: &mut dyn BlackBoxScorer,
) -> Result<Waveform> {
    let pairs = cfg.population / 2;
    if pairs == 0 {
        return Err(Error::InvalidConfig("population must be >= 2".into()));
    }
    // Probes plus one evaluation of the moved point per iteration.
    let per_iter = 2 * pairs + 1;
    if cfg.queries < per_iter + 1 {
        return Err(Error::BudgetTooSmall {
            budget: cfg.queries,
            need: per_iter + 1,
        });
    }

    let n = x_prot.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = x_prot.samples.clone();
    let as_wave = |samples: &[f64]| Waveform::new(samples.to_vec(), x_prot.sample_rate, "nes");

    let mut used = 1usize;
    let mut best_score = scorer.score(&as_wave(&w));
    let mut best = w.clone();

    while used + per_iter <= cfg.queries {
        let directions: Vec<Vec<f64>> = (0..pairs)
            .map(|_| {
                (0..n)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect();
        let mut fitness = Vec::with_capacity(per_iter);
        for u in &directions {
            for sign in [1.0, -1.0] {
                let cand: Vec<f64> = w
                    .iter()
                    .zip(u.iter())
                    .map(|(wi, ui)| (wi + sign * cfg.sigma * ui).clamp(-1.0, 1.0))
                    .collect();
                let s = scorer.score(&as_wave(&cand));
                used += 1;
                if s > best_score {
                    best_score = s;
                    best = cand.clone();
                }
                fitness.push(s);
            }
        }
        let mean = fitness.iter().sum::<f64>() / fitness.len() as f64;
        let var = fitness.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / fitness.len() as f64;
        let std = var.sqrt();
        if std > 0.0 {
            let scale = cfg.step / ((2 * pairs) as f64 * cfg.sigma);
            for (k, u) in directions.iter().enumerate() {
                let f_plus = (fitness[2 * k] - mean) / std;
                let f_minus = (fitness[2 * k + 1] - mean) / std;
                let coef = scale * (f_plus - f_minus);
                for (wi, ui) in w.iter_mut().zip(u.iter()) {
                    *wi = (*wi + coef * ui).clamp(-1.0, 1.0);
                }
            }
        }
        let s = scorer.score(&as_wave(&w));
        used += 1;
        if s > best_score {
            best_score = s;
            best = w.clone();
        }
    }
    debug_assert!(used <= cfg.queries);
    let mut out = as_wave(&best);
    out.id = format!("{}-recovered", x_prot.id);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::CANONICAL_RATE;

    fn tone(freq: f64, len: usize) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| {
                    0.5 * (2.0 * std::f64::consts::PI * freq * i as f64
                        / CANONICAL_RATE as f64)
                        .sin()
                })
                .collect(),
            CANONICAL_RATE,
            "tone",
        )
    }

    fn band_energy_db(x: &Waveform, lo_hz: f64, hi_hz: f64) -> f64 {
        let p = FftParams::default();
        let s = stft(x, &p).unwrap();
        let m = magnitude(&s);
        let bin_hz = CANONICAL_RATE as f64 / p.n_fft as f64;
        let (lo, hi) = (
            (lo_hz / bin_hz).floor() as usize,
            ((hi_hz / bin_hz).ceil() as usize).min(p.bins()),
        );
        let e: f64 = (0..m.bins.nrows())
            .map(|f| (lo..hi).map(|b| m.bins[[f, b]].powi(2)).sum::<f64>())
            .sum();
        10.0 * (e + 1e-300).log10()
    }

    #[test]
    fn quantize_bound_is_half_step() {
        let x = tone(440.0, 4000);
        let y = augment(&x, &AugmentationSpec::Quantize { bits: 8 }).unwrap();
        let max_err = x
            .samples
            .iter()
            .zip(y.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 256.0 + 1e-9, "QD error {max_err}");
    }

    #[test]
    fn speed_changes_length_arithmetically() {
        let x = tone(440.0, 16_000);
        let fast = augment(&x, &AugmentationSpec::Speed { factor: 1.1 }).unwrap();
        assert_eq!(fast.len(), (16_000.0_f64 / 1.1).round() as usize);
        let slow = augment(&x, &AugmentationSpec::Speed { factor: 0.9 }).unwrap();
        assert_eq!(slow.len(), (16_000.0_f64 / 0.9).round() as usize);
    }

    #[test]
    fn resample_roundtrip_kills_high_band() {
        // 5 kHz sits above the 4 kHz Nyquist of the 8 kHz intermediate.
        let hi = tone(5000.0, 16_000);
        let survived = augment(
            &hi,
            &AugmentationSpec::Resample {
                intermediate_hz: 8000,
            },
        )
        .unwrap();
        let before: f64 = hi.samples.iter().map(|v| v * v).sum();
        let after: f64 = survived.samples.iter().map(|v| v * v).sum();
        let drop_db = 10.0 * (before / after.max(1e-300)).log10();
        assert!(drop_db >= 40.0, "suppression {drop_db:.1} dB");
        assert_eq!(survived.len(), hi.len());
    }

    #[test]
    fn mask_zeroes_one_span_deterministically() {
        let x = tone(300.0, 16_000);
        let spec = AugmentationSpec::TimeMask {
            span_ms: 100.0,
            seed: 9,
        };
        let a = augment(&x, &spec).unwrap();
        let b = augment(&x, &spec).unwrap();
        assert_eq!(a.samples, b.samples);
        let zeros = a.samples.iter().filter(|v| **v == 0.0).count();
        assert!(zeros >= 1600, "only {zeros} zeroed samples");
    }

    #[test]
    fn mel_inversion_keeps_length_and_band_shape() {
        let x = tone(500.0, 8192);
        let y = augment(&x, &AugmentationSpec::MelInversion { iterations: 8 }).unwrap();
        assert_eq!(y.len(), x.len());
        // Dominant band survives the phase-free round trip.
        let in_band = band_energy_db(&y, 350.0, 650.0);
        let out_band = band_energy_db(&y, 2000.0, 4000.0);
        assert!(in_band > out_band + 10.0);
    }

    #[test]
    fn spectral_gate_reduces_noise_floor() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut x = tone(1000.0, 16_000);
        for v in x.samples.iter_mut() {
            *v += 0.004 * rng.random_range(-1.0..1.0);
        }
        let y = spectral_gate_denoise(&x, -40.0).unwrap();
        assert_eq!(y.len(), x.len());
        // Noise bands (well away from 1 kHz) drop by at least 10 dB.
        let before = band_energy_db(&x, 3000.0, 7000.0);
        let after = band_energy_db(&y, 3000.0, 7000.0);
        assert!(before - after >= 10.0, "reduction {}", before - after);
        // The tone itself survives.
        let tone_before = band_energy_db(&x, 900.0, 1100.0);
        let tone_after = band_energy_db(&y, 900.0, 1100.0);
        assert!((tone_before - tone_after).abs() < 3.0);
    }

    #[test]
    fn spectral_gate_passes_silence_through() {
        let x = Waveform::new(vec![0.0; 4096], CANONICAL_RATE, "s");
        let y = spectral_gate_denoise(&x, -40.0).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(y.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn counter_perturbation_identity_at_zero_radius() {
        let model = SurrogateModel::with_params(
            FftParams::new(64, 16, 64).unwrap(),
            MelParams::new(16, 0.0, 8000.0),
            CANONICAL_RATE,
            8,
            32,
            3,
        );
        let cond = CondEmbedding::from_speaker("adv", 8);
        let x = tone(220.0, 800);
        let cfg = AdvTrainConfig {
            rho_a: 0.0,
            rho_u: 8.0 / 255.0,
            steps: 5,
        };
        let y = adversarial_counter_perturbation(&x, &model, &cond, &cfg).unwrap();
        assert_eq!(x.samples, y.samples);
    }

    #[test]
    fn counter_perturbation_bounded_and_ascends() {
        let model = SurrogateModel::with_params(
            FftParams::new(64, 16, 64).unwrap(),
            MelParams::new(16, 0.0, 8000.0),
            CANONICAL_RATE,
            8,
            32,
            5,
        );
        let cond = CondEmbedding::from_speaker("adv2", 8);
        let x = tone(220.0, 800);
        let cfg = AdvTrainConfig {
            rho_a: 8.0 / 255.0,
            rho_u: 8.0 / 255.0,
            steps: 20,
        };
        let y = adversarial_counter_perturbation(&x, &model, &cond, &cfg).unwrap();
        let max_move = x
            .samples
            .iter()
            .zip(y.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_move <= cfg.rho_a + 1e-15, "moved {max_move}");

        let noise = NoiseReference::for_clip(&x, 0x5eed, &model.fft, &model.mel).unwrap();
        let w = LossWeights::default();
        let before = total_loss(&x, &x, &model, &cond, &noise, &w).unwrap().0;
        let after = total_loss(&x, &y, &model, &cond, &noise, &w).unwrap().0;
        assert!(after >= before, "ascent failed: {before} -> {after}");
    }

    #[test]
    fn nes_recovers_a_convex_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let target: Vec<f64> = (0..64).map(|_| rng.random_range(-0.5..0.5)).collect();
        let start: Vec<f64> = target
            .iter()
            .map(|t| (t + rng.random_range(-0.2..0.2)).clamp(-1.0, 1.0))
            .collect();
        let x0 = Waveform::new(start.clone(), CANONICAL_RATE, "x0");
        let d0: f64 = start
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();

        let mut scorer = |w: &Waveform| -> f64 {
            -w.samples
                .iter()
                .zip(target.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let cfg = NesConfig {
            queries: 5000,
            population: 50,
            sigma: 0.05,
            step: 0.002,
            objective: NesObjective::MaxSim,
            seed: 33,
        };
        let recovered = nes_recover(&x0, &cfg, &mut scorer).unwrap();
        let d1: f64 = recovered
            .samples
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(d1 < 0.1 * d0, "distance {d0} -> {d1}");
    }

    #[test]
    fn nes_respects_query_budget() {
        let x0 = tone(220.0, 128);
        let calls = std::cell::Cell::new(0usize);
        let mut scorer = |w: &Waveform| -> f64 {
            calls.set(calls.get() + 1);
            -w.samples.iter().map(|v| v * v).sum::<f64>()
        };
        let cfg = NesConfig {
            queries: 157,
            population: 10,
            sigma: 0.01,
            step: 0.002,
            objective: NesObjective::MaxSim,
            seed: 35,
        };
        nes_recover(&x0, &cfg, &mut scorer).unwrap();
        assert!(calls.get() <= 157, "used {} queries", calls.get());

        let tiny = NesConfig {
            queries: 5,
            population: 10,
            ..cfg
        };
        assert!(matches!(
            nes_recover(&x0, &tiny, &mut scorer),
            Err(Error::BudgetTooSmall { .. })
        ));
    }
}
