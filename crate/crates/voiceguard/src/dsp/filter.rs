//! Second-order IIR filters (RBJ biquad designs), applied forward.

use super::Waveform;
use crate::error::{Error, Result};

/// Filter kind and its frequency parameters in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Lowpass { cutoff: f64 },
    Bandpass { low: f64, high: f64 },
}

struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn lowpass(cutoff: f64, sr: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * cutoff / sr;
        let q = std::f64::consts::FRAC_1_SQRT_2;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        let a0 = 1.0 + alpha;
        Self {
            b0: (1.0 - cw) / 2.0 / a0,
            b1: (1.0 - cw) / a0,
            b2: (1.0 - cw) / 2.0 / a0,
            a1: -2.0 * cw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Constant 0 dB peak-gain bandpass centered on the geometric mean.
    fn bandpass(low: f64, high: f64, sr: f64) -> Self {
        let f0 = (low * high).sqrt();
        let q = f0 / (high - low);
        let w0 = 2.0 * std::f64::consts::PI * f0 / sr;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b1: 0.0,
            b2: -alpha / a0,
            a1: -2.0 * cw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for &xi in x {
            let y = self.b0 * xi + self.b1 * x1 + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
            x2 = x1;
            x1 = xi;
            y2 = y1;
            y1 = y;
            out.push(y);
        }
        out
    }
}

/// Applies a stable second-order filter forward over the signal.
pub fn biquad_filter(x: &Waveform, kind: FilterKind) -> Result<Waveform> {
    let nyquist = x.sample_rate as f64 / 2.0;
    let bq = match kind {
        FilterKind::Lowpass { cutoff } => {
            if cutoff >= nyquist || cutoff <= 0.0 {
                return Err(Error::CutoffAboveNyquist { cutoff, nyquist });
            }
            Biquad::lowpass(cutoff, x.sample_rate as f64)
        }
        FilterKind::Bandpass { low, high } => {
            if high >= nyquist || low <= 0.0 || low >= high {
                return Err(Error::CutoffAboveNyquist {
                    cutoff: high,
                    nyquist,
                });
            }
            Biquad::bandpass(low, high, x.sample_rate as f64)
        }
    };
    Ok(Waveform::new(
        bq.run(&x.samples),
        x.sample_rate,
        x.id.clone(),
    ))
}
