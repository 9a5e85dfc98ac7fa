//! PCM16 mono WAV reading and writing.
//!
//! Only RIFF/WAVE files with 16-bit PCM mono data are accepted; stereo and
//! other encodings are rejected with guidance instead of silently converted,
//! because downmixing would change the SNR semantics of everything
//! downstream. Loading converts int16 to float by `/32768` and resamples to
//! the canonical 16 kHz rate, recording the original rate.

use std::path::Path;

use crate::dsp::{resample_ratio, Waveform, CANONICAL_RATE};
use crate::error::{Error, Result};

/// What was actually in the file, before canonicalization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AudioFileRecord {
    pub path: String,
    pub duration_s: f64,
    /// Sample rate stored in the file (the returned waveform is 16 kHz).
    pub sample_rate: u32,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().expect("sized")))
        .ok_or_else(|| Error::AudioFormat("truncated header".into()))
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16> {
    bytes
        .get(at..at + 2)
        .map(|s| u16::from_le_bytes(s.try_into().expect("sized")))
        .ok_or_else(|| Error::AudioFormat("truncated header".into()))
}

/// Loads a PCM16 mono WAV, normalizes to [-1, 1], and resamples to 16 kHz.
pub fn load_wav(path: &Path) -> Result<(Waveform, AudioFileRecord)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::AudioFormat(
            "not a RIFF/WAVE file (bad or truncated header)".into(),
        ));
    }

    // Walk chunks for fmt and data.
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4)? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if body + 16 > bytes.len() {
                    return Err(Error::AudioFormat("truncated fmt chunk".into()));
                }
                fmt = Some((
                    read_u16(&bytes, body)?,
                    read_u16(&bytes, body + 2)?,
                    read_u32(&bytes, body + 4)?,
                    read_u16(&bytes, body + 14)?,
                ));
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        pos = body + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::AudioFormat("missing fmt chunk".into()))?;
    if format != 1 || bits != 16 {
        return Err(Error::AudioFormat(format!(
            "only PCM16 is accepted (format tag {format}, {bits} bits); convert the file first"
        )));
    }
    if channels != 1 {
        return Err(Error::AudioFormat(format!(
            "{channels}-channel audio rejected: downmix to mono explicitly before protecting"
        )));
    }
    let (start, size) = data.ok_or_else(|| Error::AudioFormat("missing data chunk".into()))?;
    if start + size > bytes.len() {
        return Err(Error::AudioFormat(
            "data chunk extends past end of file".into(),
        ));
    }
    let n = size / 2;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let v = i16::from_le_bytes(
            bytes[start + 2 * i..start + 2 * i + 2]
                .try_into()
                .expect("sized"),
        );
        samples.push(v as f64 / 32768.0);
    }

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "wav".into());
    let raw = Waveform::new(samples, rate, id);
    let record = AudioFileRecord {
        path: path.to_string_lossy().into_owned(),
        duration_s: raw.duration_s(),
        sample_rate: rate,
    };
    let wave = if rate == CANONICAL_RATE {
        raw
    } else {
        resample_ratio(&raw, CANONICAL_RATE as f64 / rate as f64, CANONICAL_RATE)
    };
    Ok((wave, record))
}

/// Serializes a waveform as PCM16 mono WAV bytes:
/// `round(clamp(v, -1, 1) * 32767)`.
pub fn wav_bytes(w: &Waveform) -> Vec<u8> {
    let n = w.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in &w.samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Writes a waveform to disk as PCM16 mono WAV.
pub fn save_wav(w: &Waveform, path: &Path) -> Result<()> {
    std::fs::write(path, wav_bytes(w))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("vg_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn tone(len: usize, sr: u32) -> Waveform {
        let samples = (0..len)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr, "tone")
    }

    #[test]
    fn roundtrip_at_canonical_rate_is_quantization_bounded() {
        let x = tone(16_000, CANONICAL_RATE);
        let path = temp("rt.wav");
        save_wav(&x, &path).unwrap();
        let (y, record) = load_wav(&path).unwrap();
        assert_eq!(y.len(), 16_000);
        assert_eq!(record.sample_rate, CANONICAL_RATE);
        assert_eq!(y.sample_rate, CANONICAL_RATE);
        let max_err = x
            .samples
            .iter()
            .zip(y.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 32768.0 + 1e-12, "max err {max_err}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn one_second_file_has_sixteen_k_samples() {
        let x = tone(16_000, CANONICAL_RATE);
        let path = temp("sec.wav");
        save_wav(&x, &path).unwrap();
        let (y, _) = load_wav(&path).unwrap();
        assert_eq!(y.len(), 16_000);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn load_resamples_to_canonical() {
        let x = tone(22_050, 22_050);
        let path = temp("rate.wav");
        save_wav(&x, &path).unwrap();
        let (y, record) = load_wav(&path).unwrap();
        assert_eq!(record.sample_rate, 22_050);
        assert_eq!(y.sample_rate, CANONICAL_RATE);
        assert_eq!(y.len(), 16_000);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_file_is_a_header_error() {
        let x = tone(4000, CANONICAL_RATE);
        let path = temp("trunc.wav");
        save_wav(&x, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(load_wav(&path), Err(Error::AudioFormat(_))));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn stereo_rejected_with_guidance() {
        let x = tone(1000, CANONICAL_RATE);
        let mut bytes = wav_bytes(&x);
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes()); // claim stereo
        let path = temp("stereo.wav");
        std::fs::write(&path, &bytes).unwrap();
        match load_wav(&path) {
            Err(Error::AudioFormat(msg)) => assert!(msg.contains("mono")),
            other => panic!("expected stereo rejection, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }
}
