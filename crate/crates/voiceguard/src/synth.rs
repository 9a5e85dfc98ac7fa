//! Synthetic pseudo-speaker voices.
//!
//! When no real recordings are supplied, experiments run on generated
//! pseudo-speakers: glottal-style harmonic pulse trains shaped by a
//! per-speaker formant set, alternating with band-limited noise bursts as
//! consonants. The clips are not speech, but they carry exactly the
//! properties the toolkit measures — per-speaker spectral envelopes, pitch,
//! voiced/unvoiced structure — with no dataset licensing. The speaker
//!-similarity calibration population comes from the same generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{biquad_filter, FilterKind, Waveform, CANONICAL_RATE};

/// A speaker's fixed vocal-tract parameters.
#[derive(Debug, Clone)]
struct SpeakerVoice {
    f0: f64,
    formants: [f64; 3],
    bandwidths: [f64; 3],
    gains: [f64; 3],
    /// Consonant noise band.
    sibilance: (f64, f64),
}

fn speaker_voice(corpus_seed: u64, speaker_idx: usize) -> SpeakerVoice {
    let mut rng =
        ChaCha8Rng::seed_from_u64(corpus_seed ^ (speaker_idx as u64).wrapping_mul(0xA24BAED4963EE407));
    SpeakerVoice {
        f0: rng.random_range(95.0..230.0),
        formants: [
            rng.random_range(320.0..880.0),
            rng.random_range(950.0..2350.0),
            rng.random_range(2450.0..3400.0),
        ],
        bandwidths: [
            rng.random_range(60.0..110.0),
            rng.random_range(80.0..140.0),
            rng.random_range(120.0..200.0),
        ],
        gains: [1.0, rng.random_range(0.5..0.85), rng.random_range(0.25..0.5)],
        sibilance: {
            let lo = rng.random_range(1800.0..3000.0);
            (lo, lo + rng.random_range(1500.0..2800.0))
        },
    }
}

/// One generated utterance for `(corpus_seed, speaker_idx, clip_idx)`.
/// Deterministic; roughly `len` samples of alternating voiced segments and
/// consonant bursts at 16 kHz, peak-normalized to 0.5.
pub fn generate_clip(corpus_seed: u64, speaker_idx: usize, clip_idx: usize, len: usize) -> Waveform {
    let voice = speaker_voice(corpus_seed, speaker_idx);
    let mut rng = ChaCha8Rng::seed_from_u64(
        corpus_seed
            ^ (speaker_idx as u64).wrapping_mul(0xA24BAED4963EE407)
            ^ (clip_idx as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15),
    );
    let sr = CANONICAL_RATE as f64;

    // Voiced source: harmonic stack with vibrato and slow drift.
    let mut source = vec![0.0f64; len];
    let mut gate = vec![0.0f64; len];
    let mut pos = 0usize;
    let mut voiced_turn = true;
    while pos < len {
        let dur_ms = if voiced_turn {
            rng.random_range(140.0..260.0)
        } else {
            rng.random_range(45.0..90.0)
        };
        let seg = ((dur_ms / 1000.0) * sr) as usize;
        let end = (pos + seg).min(len);
        if voiced_turn {
            let drift = rng.random_range(-0.04..0.04);
            let mut phase = rng.random_range(0.0..std::f64::consts::TAU);
            for (i, s) in source.iter_mut().enumerate().take(end).skip(pos) {
                let t = i as f64 / sr;
                let vibrato = 1.0 + drift + 0.015 * (std::f64::consts::TAU * 5.0 * t).sin();
                phase += std::f64::consts::TAU * voice.f0 * vibrato / sr;
                let mut v = 0.0;
                let mut h = 1.0;
                while voice.f0 * h < 5000.0 {
                    v += (phase * h).sin() / h;
                    h += 1.0;
                }
                *s = v;
                gate[i] = 1.0;
            }
        } else {
            for i in pos..end {
                source[i] = 0.45 * rng.random_range(-1.0..1.0);
                gate[i] = -1.0;
            }
        }
        // Short silent articulation gap.
        pos = end + ((rng.random_range(8.0..18.0) / 1000.0) * sr) as usize;
        voiced_turn = !voiced_turn;
    }

    // Shape the voiced source through parallel formant resonators.
    let raw = Waveform::new(source.clone(), CANONICAL_RATE, "src");
    let mut shaped = vec![0.0f64; len];
    for ((f, bw), g) in voice
        .formants
        .iter()
        .zip(voice.bandwidths.iter())
        .zip(voice.gains.iter())
    {
        let band = biquad_filter(
            &raw,
            FilterKind::Bandpass {
                low: (f - bw / 2.0).max(60.0),
                high: f + bw / 2.0,
            },
        )
        .expect("formant bands below nyquist");
        for (acc, v) in shaped.iter_mut().zip(band.samples.iter()) {
            *acc += g * v;
        }
    }
    // Consonant noise through the speaker's sibilance band.
    let noise_band = biquad_filter(
        &raw,
        FilterKind::Bandpass {
            low: voice.sibilance.0,
            high: voice.sibilance.1.min(7600.0),
        },
    )
    .expect("noise band below nyquist");

    // Broadband recording floor keeps every mel band off the log floor,
    // like a real microphone chain would.
    let mut floor_rng = ChaCha8Rng::seed_from_u64(
        corpus_seed ^ (speaker_idx as u64 + 7) ^ ((clip_idx as u64) << 17),
    );
    let mut samples: Vec<f64> = (0..len)
        .map(|i| {
            let body = if gate[i] > 0.0 {
                shaped[i] + 0.02 * source[i]
            } else if gate[i] < 0.0 {
                noise_band.samples[i] * 2.0
            } else {
                0.0
            };
            body + 0.006 * floor_rng.random_range(-1.0..1.0)
        })
        .collect();

    // Soft fade at segment boundaries to avoid clicks, then peak-normalize.
    let fade = (0.004 * sr) as usize;
    for i in 0..len {
        let edge = gate[i] != 0.0
            && ((i < fade)
                || (i + 1 < len && gate[i + 1] == 0.0)
                || (i > 0 && gate[i - 1] == 0.0));
        if edge {
            samples[i] *= 0.5;
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let k = 0.5 / peak;
        for v in samples.iter_mut() {
            *v *= k;
        }
    }
    Waveform::new(
        samples,
        CANONICAL_RATE,
        format!("s{speaker_idx:02}-c{clip_idx:02}"),
    )
}
