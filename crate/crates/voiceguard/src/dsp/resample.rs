//! Band-limited resampling with a Blackman-windowed sinc kernel.
//!
//! The kernel is evaluated on the fly per output sample, which keeps the
//! operator an explicit linear map `y = R x` — the adjoint used by gradient
//! paths simply runs the same loops scattering instead of gathering.

use super::Waveform;
use crate::error::{Error, Result};

/// Target rates accepted by [`resample`].
pub const SUPPORTED_RATES: [u32; 5] = [8000, 10_000, 16_000, 22_050, 24_000];

/// Zero crossings of the sinc on each side of the center, at the cutoff rate.
const ZERO_CROSSINGS: f64 = 24.0;
/// Cutoff rolloff guard below the theoretical Nyquist of the slower rate.
const ROLLOFF: f64 = 0.945;

fn blackman(u: f64) -> f64 {
    // u in [-1, 1]
    let t = std::f64::consts::PI * (u + 1.0);
    0.42 - 0.5 * t.cos() + 0.08 * (2.0 * t).cos()
}

fn sinc(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        1.0
    } else {
        let pv = std::f64::consts::PI * v;
        pv.sin() / pv
    }
}

struct Kernel {
    /// Cutoff in cycles per input sample.
    fc: f64,
    /// Half-width in input samples.
    half: f64,
}

impl Kernel {
    fn for_ratio(ratio: f64) -> Self {
        let fc = 0.5 * ratio.min(1.0) * ROLLOFF;
        Self {
            fc,
            half: ZERO_CROSSINGS / (2.0 * fc),
        }
    }

    fn eval(&self, u: f64) -> f64 {
        if u.abs() >= self.half {
            return 0.0;
        }
        2.0 * self.fc * sinc(2.0 * self.fc * u) * blackman(u / self.half)
    }
}

/// Precomputed polyphase taps: output `j` lands at input coordinate
/// `t = (j % p) * q / p  (mod 1)` plus an integer offset, so only `p`
/// distinct fractional phases exist when the ratio is the rational `p/q`.
struct PhaseTable {
    p: usize,
    q: usize,
    /// Per phase: (relative start offset from floor(t), normalized weights).
    phases: Vec<(isize, Vec<f64>)>,
}

/// Detects a small-denominator rational ratio; the phase-table path and the
/// generic path compute the same operator, this one without per-tap kernel
/// evaluation.
fn rationalize(ratio: f64) -> Option<(usize, usize)> {
    for p in 1..=64usize {
        let q = ratio.recip() * p as f64;
        let q_round = q.round();
        if q_round >= 1.0 && (q - q_round).abs() < 1e-9 {
            let implied = p as f64 / q_round;
            if (implied - ratio).abs() < 1e-12 * ratio.max(1.0) {
                return Some((p, q_round as usize));
            }
        }
    }
    None
}

impl PhaseTable {
    fn build(ratio: f64) -> Option<Self> {
        let (p, q) = rationalize(ratio)?;
        let kernel = Kernel::for_ratio(p as f64 / q as f64);
        let mut phases = Vec::with_capacity(p);
        for phase in 0..p {
            // Fractional position of this output phase in input samples.
            let frac = (phase * q) as f64 / p as f64;
            let frac = frac - frac.floor();
            let lo = (frac - kernel.half).ceil() as isize;
            let hi = (frac + kernel.half).floor() as isize;
            let mut weights: Vec<f64> = (lo..=hi).map(|i| kernel.eval(frac - i as f64)).collect();
            let norm: f64 = weights.iter().sum();
            if norm.abs() > 1e-12 {
                for w in weights.iter_mut() {
                    *w /= norm;
                }
            }
            phases.push((lo, weights));
        }
        Some(Self { p, q, phases })
    }

    fn forward(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let n = x.len() as isize;
        let mut out = Vec::with_capacity(out_len);
        for j in 0..out_len {
            let phase = j % self.p;
            let base = ((j * self.q) / self.p) as isize;
            let (lo, weights) = &self.phases[phase];
            let clipped = base + lo < 0 || base + lo + weights.len() as isize > n;
            let mut acc = 0.0;
            if clipped {
                // Renormalize over the in-range taps, like the generic path.
                let mut wsum = 0.0;
                for (k, w) in weights.iter().enumerate() {
                    let i = base + lo + k as isize;
                    if i >= 0 && i < n {
                        acc += w * x[i as usize];
                        wsum += w;
                    }
                }
                acc = if wsum.abs() > 1e-12 { acc / wsum } else { 0.0 };
            } else {
                for (k, w) in weights.iter().enumerate() {
                    acc += w * x[(base + lo + k as isize) as usize];
                }
            }
            out.push(acc);
        }
        out
    }

    fn adjoint(&self, d_out: &[f64], src_len: usize) -> Vec<f64> {
        let n = src_len as isize;
        let mut g = vec![0.0; src_len];
        for (j, &dj) in d_out.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            let phase = j % self.p;
            let base = ((j * self.q) / self.p) as isize;
            let (lo, weights) = &self.phases[phase];
            let clipped = base + lo < 0 || base + lo + weights.len() as isize > n;
            if clipped {
                let mut wsum = 0.0;
                for (k, w) in weights.iter().enumerate() {
                    let i = base + lo + k as isize;
                    if i >= 0 && i < n {
                        wsum += w;
                    }
                }
                if wsum.abs() <= 1e-12 {
                    continue;
                }
                for (k, w) in weights.iter().enumerate() {
                    let i = base + lo + k as isize;
                    if i >= 0 && i < n {
                        g[i as usize] += w / wsum * dj;
                    }
                }
            } else {
                for (k, w) in weights.iter().enumerate() {
                    g[(base + lo + k as isize) as usize] += w * dj;
                }
            }
        }
        g
    }
}

thread_local! {
    static TABLE_CACHE: std::cell::RefCell<std::collections::HashMap<u64, std::rc::Rc<Option<PhaseTable>>>> =
        std::cell::RefCell::new(std::collections::HashMap::new());
}

fn phase_table_for(ratio: f64) -> std::rc::Rc<Option<PhaseTable>> {
    TABLE_CACHE.with(|c| {
        c.borrow_mut()
            .entry(ratio.to_bits())
            .or_insert_with(|| std::rc::Rc::new(PhaseTable::build(ratio)))
            .clone()
    })
}

/// Resample by an arbitrary ratio `target_len/src_len`; output length is
/// `round(len * ratio)`. Each output sample's taps are normalized to unit DC
/// gain, which keeps constants exactly constant.
pub fn resample_ratio(x: &Waveform, ratio: f64, out_rate: u32) -> Waveform {
    if (ratio - 1.0).abs() < 1e-15 {
        let mut out = x.clone();
        out.sample_rate = out_rate;
        return out;
    }
    let n = x.len();
    let out_len = (n as f64 * ratio).round() as usize;
    if let Some(table) = phase_table_for(ratio).as_ref() {
        return Waveform::new(table.forward(&x.samples, out_len), out_rate, x.id.clone());
    }
    let kernel = Kernel::for_ratio(ratio);
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let t = j as f64 / ratio;
        let lo = (t - kernel.half).ceil().max(0.0) as usize;
        let hi = ((t + kernel.half).floor() as isize).min(n as isize - 1);
        let mut acc = 0.0;
        let mut norm = 0.0;
        let mut i = lo as isize;
        while i <= hi {
            let w = kernel.eval(t - i as f64);
            acc += w * x.samples[i as usize];
            norm += w;
            i += 1;
        }
        out.push(if norm.abs() > 1e-12 { acc / norm } else { 0.0 });
    }
    Waveform::new(out, out_rate, x.id.clone())
}

/// Adjoint of [`resample_ratio`] for a fixed input length: pulls a gradient
/// over the resampled signal back to the source samples.
pub fn resample_ratio_vjp(d_out: &[f64], src_len: usize, ratio: f64) -> Vec<f64> {
    if (ratio - 1.0).abs() < 1e-15 {
        return d_out.to_vec();
    }
    if let Some(table) = phase_table_for(ratio).as_ref() {
        return table.adjoint(d_out, src_len);
    }
    let kernel = Kernel::for_ratio(ratio);
    let mut g = vec![0.0; src_len];
    for (j, &dj) in d_out.iter().enumerate() {
        if dj == 0.0 {
            continue;
        }
        let t = j as f64 / ratio;
        let lo = (t - kernel.half).ceil().max(0.0) as usize;
        let hi = ((t + kernel.half).floor() as isize).min(src_len as isize - 1);
        let mut norm = 0.0;
        let mut i = lo as isize;
        while i <= hi {
            norm += kernel.eval(t - i as f64);
            i += 1;
        }
        if norm.abs() <= 1e-12 {
            continue;
        }
        let scale = dj / norm;
        let mut i = lo as isize;
        while i <= hi {
            g[i as usize] += scale * kernel.eval(t - i as f64);
            i += 1;
        }
    }
    g
}

/// Resample to one of the supported target rates.
pub fn resample(x: &Waveform, target_hz: u32) -> Result<Waveform> {
    if !SUPPORTED_RATES.contains(&target_hz) {
        return Err(Error::UnsupportedRate(target_hz));
    }
    if target_hz == x.sample_rate {
        return Ok(x.clone());
    }
    let ratio = target_hz as f64 / x.sample_rate as f64;
    Ok(resample_ratio(x, ratio, target_hz))
}
