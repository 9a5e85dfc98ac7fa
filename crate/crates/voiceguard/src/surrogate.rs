//! A small differentiable spectrogram generator.
//!
//! The model stands in for the synthesizer an attacker would train: it
//! consumes the linear spectrogram of (possibly perturbed) audio plus a
//! conditioning vector and predicts the log-mel spectrogram of the same
//! audio, frame by frame. A fixed coarse-envelope bottleneck blurs the
//! spectral input before the learned layers, so fine speaker detail must be
//! carried by the parameters and the conditioning — this is what makes the
//! quality of the training data govern the quality of later synthesis.
//!
//! Architecture per frame: `(n_fft/2+1 + cond_dim) -> 128 -> 128 -> n_mels`
//! with tanh on the hidden layers. Parameters are stored at f32 precision
//! (the model file format) and kept f32-exact in memory; all arithmetic runs
//! in f64, and gradients with respect to both the parameters and the raw
//! input samples are exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{
    magnitude, magnitude_vjp, mel_spectrogram_forward, stft, stft_vjp, ComplexSpectrogram,
    FftParams, MelParams, MelSpectrogram, Spectrogram, Waveform, CANONICAL_RATE,
};
use crate::error::{Error, Result};

const MODEL_MAGIC: &[u8; 4] = b"VGSM";
const MODEL_VERSION: u32 = 1;
/// Desk-scale ceiling on the parameter count.
pub const MAX_PARAMS: usize = 500_000;
/// Width of the coarse spectral-envelope bottleneck. One band reduces the
/// spectral input to a loudness contour: synthesis then has to recreate the
/// whole spectral shape from the conditioning and the trained parameters,
/// which is what ties synthesis quality to the training data.
const ENVELOPE_BANDS: usize = 1;

/// Speaker/text conditioning embedding: a unit-norm vector derived from the
/// speaker id by hashing into a reproducible pseudo-embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct CondEmbedding {
    pub values: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl CondEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Embedding for a speaker id; deterministic across runs.
    pub fn from_speaker(id: &str, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(id.as_bytes()));
        let mut v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        } else {
            v[0] = 1.0;
        }
        Self { values: v }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    /// `out x in`, row-major.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn xavier(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            quantize_f32(rng.random_range(-limit..limit))
        });
        Dense {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Snap a value onto the f32 grid while keeping f64 arithmetic downstream.
fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Gradients of a scalar loss with respect to the model parameters and the
/// raw input samples.
pub struct GradientBundle {
    pub d_params: ModelGrads,
    pub d_waveform: Vec<f64>,
}

/// Per-layer parameter gradients, same shapes as the model.
pub struct ModelGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ModelGrads {
    fn zeros_like(model: &SurrogateModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.0 += &b.0;
            a.1 += &b.1;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.layers.iter_mut() {
            l.0 *= s;
            l.1 *= s;
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.0.iter().all(|v| v.is_finite()) && l.1.iter().all(|v| v.is_finite()))
    }
}

/// The surrogate generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub fft: FftParams,
    pub mel: MelParams,
    pub sample_rate: u32,
    pub cond_dim: usize,
    pub hidden: usize,
    pub(crate) layers: Vec<Dense>,
    /// Fixed envelope bottleneck, `ENVELOPE_BANDS x bins`, hat rows.
    envelope: Array2<f64>,
    envelope_rowsum: Array1<f64>,
}

/// Mel-spaced hat rows over FFT bins, used as the fixed input bottleneck.
fn envelope_bank(p: &FftParams, sample_rate: u32) -> Array2<f64> {
    crate::dsp::mel_filterbank(
        p,
        &MelParams::new(ENVELOPE_BANDS, 0.0, sample_rate as f64 / 2.0),
        sample_rate,
    )
}

impl SurrogateModel {
    /// Model for the canonical transform configuration.
    pub fn init(seed: u64) -> Self {
        Self::with_params(
            FftParams::default(),
            MelParams::default(),
            CANONICAL_RATE,
            8,
            128,
            seed,
        )
    }

    /// Model for explicit transform dimensions; Xavier-uniform weights,
    /// reproducible from the seed.
    pub fn with_params(
        fft: FftParams,
        mel: MelParams,
        sample_rate: u32,
        cond_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let bins = fft.bins();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Dense::xavier(&mut rng, hidden, bins + cond_dim),
            Dense::xavier(&mut rng, hidden, hidden),
            Dense::xavier(&mut rng, mel.n_mels, hidden),
        ];
        let envelope = envelope_bank(&fft, sample_rate);
        let envelope_rowsum = envelope.sum_axis(Axis(1));
        let model = Self {
            fft,
            mel,
            sample_rate,
            cond_dim,
            hidden,
            layers,
            envelope,
            envelope_rowsum,
        };
        assert!(
            model.param_count() < MAX_PARAMS,
            "parameter count {} exceeds the desk-scale ceiling",
            model.param_count()
        );
        model
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn check_input(&self, x: &Waveform) -> Result<()> {
        if x.sample_rate != self.sample_rate {
            return Err(Error::ParamMismatch(format!(
                "model expects {} Hz input, got {} Hz",
                self.sample_rate, x.sample_rate
            )));
        }
        Ok(())
    }

    /// The spectral block feeds every bin; without this scale the first
    /// layer's pre-activations grow like sqrt(bins) and saturate the tanh.
    fn input_scale(&self) -> f64 {
        1.0 / (self.fft.bins() as f64).sqrt()
    }

    /// Blur a magnitude spectrogram through the fixed envelope bottleneck and
    /// compress: `log1p(E^T (E mag / rowsum)) / sqrt(bins)` per frame.
    fn bottleneck(&self, mag: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut band = mag.dot(&self.envelope.t());
        for (mut col, r) in band
            .columns_mut()
            .into_iter()
            .zip(self.envelope_rowsum.iter())
        {
            col.mapv_inplace(|v| v / r);
        }
        let blurred = band.dot(&self.envelope);
        let scale = self.input_scale();
        let compressed = blurred.mapv(|v| v.ln_1p() * scale);
        (blurred, compressed)
    }

    fn bottleneck_vjp(&self, blurred: &Array2<f64>, d_compressed: &Array2<f64>) -> Array2<f64> {
        let scale = self.input_scale();
        let d_blur = d_compressed.mapv(|v| v * scale) / &blurred.mapv(|v| 1.0 + v);
        let mut d_band = d_blur.dot(&self.envelope.t());
        for (mut col, r) in d_band
            .columns_mut()
            .into_iter()
            .zip(self.envelope_rowsum.iter())
        {
            col.mapv_inplace(|v| v / r);
        }
        d_band.dot(&self.envelope)
    }

    /// Forward pass from a precomputed magnitude spectrogram. The returned
    /// state retains every intermediate needed for an exact backward pass.
    pub fn forward_from_magnitude(&self, mag: &Spectrogram, cond: &CondEmbedding) -> MlpForward {
        assert_eq!(cond.dim(), self.cond_dim, "conditioning width mismatch");
        let frames = mag.bins.nrows();
        let bins = mag.bins.ncols();
        let (blurred, compressed) = self.bottleneck(&mag.bins);

        let mut v = Array2::zeros((frames, bins + self.cond_dim));
        v.slice_mut(ndarray::s![.., ..bins]).assign(&compressed);
        for f in 0..frames {
            for (c, val) in cond.values.iter().enumerate() {
                v[[f, bins + c]] = *val;
            }
        }
        let z1 = v.dot(&self.layers[0].w.t()) + &self.layers[0].b;
        let h1 = z1.mapv(f64::tanh);
        let z2 = h1.dot(&self.layers[1].w.t()) + &self.layers[1].b;
        let h2 = z2.mapv(f64::tanh);
        let out = h2.dot(&self.layers[2].w.t()) + &self.layers[2].b;
        MlpForward {
            blurred,
            v,
            h1,
            h2,
            output: MelSpectrogram {
                bins: out,
                params: self.mel,
            },
        }
    }

    /// Full forward pass: STFT, magnitude, bottleneck, MLP.
    pub fn forward(&self, x: &Waveform, cond: &CondEmbedding) -> Result<SurrogateForward> {
        self.check_input(x)?;
        let complex = stft(x, &self.fft)?;
        let mag = magnitude(&complex);
        let mlp = self.forward_from_magnitude(&mag, cond);
        Ok(SurrogateForward { complex, mag, mlp })
    }

    /// Predicted mel spectrogram only.
    pub fn predict(&self, x: &Waveform, cond: &CondEmbedding) -> Result<MelSpectrogram> {
        Ok(self.forward(x, cond)?.mlp.output)
    }

    /// Backward pass of the MLP alone: upstream gradient over the predicted
    /// mel bins to (parameter gradients, magnitude-bin gradient).
    pub fn backward_from_magnitude(
        &self,
        fwd: &MlpForward,
        d_out: &Array2<f64>,
    ) -> (ModelGrads, Array2<f64>) {
        assert_eq!(
            d_out.raw_dim(),
            fwd.output.bins.raw_dim(),
            "upstream gradient shape mismatch"
        );
        let bins = fwd.v.ncols() - self.cond_dim;
        let mut grads = ModelGrads::zeros_like(self);

        grads.layers[2].0 = d_out.t().dot(&fwd.h2);
        grads.layers[2].1 = d_out.sum_axis(Axis(0));
        let d_h2 = d_out.dot(&self.layers[2].w);

        let d_z2 = &d_h2 * &fwd.h2.mapv(|h| 1.0 - h * h);
        grads.layers[1].0 = d_z2.t().dot(&fwd.h1);
        grads.layers[1].1 = d_z2.sum_axis(Axis(0));
        let d_h1 = d_z2.dot(&self.layers[1].w);

        let d_z1 = &d_h1 * &fwd.h1.mapv(|h| 1.0 - h * h);
        grads.layers[0].0 = d_z1.t().dot(&fwd.v);
        grads.layers[0].1 = d_z1.sum_axis(Axis(0));
        let d_v = d_z1.dot(&self.layers[0].w);

        let d_compressed = d_v.slice(ndarray::s![.., ..bins]).to_owned();
        let d_mag = self.bottleneck_vjp(&fwd.blurred, &d_compressed);
        (grads, d_mag)
    }

    /// Exact reverse-mode gradients of a scalar loss through the MLP, the
    /// bottleneck, the magnitude, and the STFT, down to raw samples.
    pub fn backward(&self, fwd: &SurrogateForward, d_out: &Array2<f64>) -> Result<GradientBundle> {
        if d_out.raw_dim() != fwd.mlp.output.bins.raw_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", fwd.mlp.output.bins.shape()),
                got: format!("{:?}", d_out.shape()),
            });
        }
        let (d_params, d_mag) = self.backward_from_magnitude(&fwd.mlp, d_out);
        let (d_re, d_im) = magnitude_vjp(&fwd.complex, &fwd.mag, &d_mag);
        let d_waveform = stft_vjp(&fwd.complex, &d_re, &d_im);
        Ok(GradientBundle {
            d_params,
            d_waveform,
        })
    }

    /// One full-batch gradient-descent step on the mean reconstruction loss
    /// `L1(predict(x), mel(x))`; returns the pre-step loss. Parameters stay
    /// on the f32 grid after the update.
    pub fn train_step(&mut self, batch: &[(Waveform, CondEmbedding)], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("train_step on empty batch".into()));
        }
        let inv_batch = 1.0 / batch.len() as f64;
        let mut total_loss = 0.0;
        let mut grads = ModelGrads::zeros_like(self);
        // Per-clip results are collected in batch order so parallel execution
        // cannot change the reduction order (bitwise reproducibility).
        let per_clip: Vec<Result<(f64, ModelGrads)>> = {
            use rayon::prelude::*;
            batch
                .par_iter()
                .map(|(x, cond)| {
                    let fwd = self.forward(x, cond)?;
                    let target = mel_spectrogram_forward(x, &self.fft, &self.mel)?;
                    let diff = &fwd.mlp.output.bins - &target.logmel.bins;
                    let n = diff.len() as f64;
                    let loss = diff.mapv(f64::abs).sum() / n;
                    let upstream = diff.mapv(|d| crate::objectives::l1_sign(d) / n * inv_batch);
                    let (d_params, _) = self.backward_from_magnitude(&fwd.mlp, &upstream);
                    Ok((loss, d_params))
                })
                .collect()
        };
        for r in per_clip {
            let (loss, d_params) = r?;
            total_loss += loss * inv_batch;
            grads.add_assign(&d_params);
        }
        for (layer, g) in self.layers.iter_mut().zip(grads.layers.iter()) {
            ndarray::Zip::from(&mut layer.w)
                .and(&g.0)
                .for_each(|w, d| *w = quantize_f32(*w - lr * d));
            ndarray::Zip::from(&mut layer.b)
                .and(&g.1)
                .for_each(|b, d| *b = quantize_f32(*b - lr * d));
        }
        Ok(total_loss)
    }

    /// Serializes as little-endian binary: magic, version, dims, f32 blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for dim in [
            self.fft.n_fft as u32,
            self.fft.hop as u32,
            self.fft.win as u32,
            self.mel.n_mels as u32,
            self.sample_rate,
            self.cond_dim as u32,
            self.hidden as u32,
        ] {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        out.extend_from_slice(&self.mel.fmin.to_le_bytes());
        out.extend_from_slice(&self.mel.fmax.to_le_bytes());
        for layer in &self.layers {
            for v in layer.w.iter().chain(layer.b.iter()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Loads a model saved by [`SurrogateModel::save`]; parameters round-trip
    /// bit-exactly.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::ModelFormat("truncated model file".into()));
            }
            let s = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        if take(&mut cursor, 4)? != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic, not a model file".into()));
        }
        let read_u32 = |cursor: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(
                take(cursor, 4)?.try_into().expect("sized slice"),
            ))
        };
        let version = read_u32(&mut cursor)?;
        if version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!(
                "incompatible model version {version}, this build reads {MODEL_VERSION}"
            )));
        }
        let n_fft = read_u32(&mut cursor)? as usize;
        let hop = read_u32(&mut cursor)? as usize;
        let win = read_u32(&mut cursor)? as usize;
        let n_mels = read_u32(&mut cursor)? as usize;
        let sample_rate = read_u32(&mut cursor)?;
        let cond_dim = read_u32(&mut cursor)? as usize;
        let hidden = read_u32(&mut cursor)? as usize;
        let fmin = f64::from_le_bytes(take(&mut cursor, 8)?.try_into().expect("sized"));
        let fmax = f64::from_le_bytes(take(&mut cursor, 8)?.try_into().expect("sized"));
        let fft = FftParams::new(n_fft, hop, win)
            .map_err(|e| Error::ModelFormat(format!("bad dims: {e}")))?;
        let mel = MelParams::new(n_mels, fmin, fmax);

        let bins = fft.bins();
        let shapes = [
            (hidden, bins + cond_dim),
            (hidden, hidden),
            (n_mels, hidden),
        ];
        let mut layers = Vec::with_capacity(3);
        for (out_dim, in_dim) in shapes {
            let mut w = Array2::zeros((out_dim, in_dim));
            for v in w.iter_mut() {
                *v = f32::from_le_bytes(take(&mut cursor, 4)?.try_into().expect("sized")) as f64;
            }
            let mut b = Array1::zeros(out_dim);
            for v in b.iter_mut() {
                *v = f32::from_le_bytes(take(&mut cursor, 4)?.try_into().expect("sized")) as f64;
            }
            layers.push(Dense { w, b });
        }
        if cursor != bytes.len() {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes after parameter blob",
                bytes.len() - cursor
            )));
        }
        let envelope = envelope_bank(&fft, sample_rate);
        let envelope_rowsum = envelope.sum_axis(Axis(1));
        Ok(Self {
            fft,
            mel,
            sample_rate,
            cond_dim,
            hidden,
            layers,
            envelope,
            envelope_rowsum,
        })
    }
}

/// Per-frame MLP forward state (input already reduced to magnitudes).
pub struct MlpForward {
    blurred: Array2<f64>,
    v: Array2<f64>,
    h1: Array2<f64>,
    pub(crate) h2: Array2<f64>,
    pub output: MelSpectrogram,
}

/// Full forward state including the spectral front end.
pub struct SurrogateForward {
    pub complex: ComplexSpectrogram,
    pub mag: Spectrogram,
    pub mlp: MlpForward,
}

impl SurrogateForward {
    pub fn output(&self) -> &MelSpectrogram {
        &self.mlp.output
    }
}
