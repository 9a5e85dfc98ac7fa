//! Protection losses and their gradients.
//!
//! The pivotal reconstruction loss is the mean L1 distance between the
//! protected audio's mel spectrogram and the surrogate's prediction. The
//! concealment loss steers the prediction toward a fixed Gaussian noise
//! reference through a KL term plus an L1 term. The perception losses bound
//! audible damage in the frequency (STFT) and envelope (STOI) domains. The
//! composite objective is
//!
//! `L = L_mel + beta * (KL(x_hat, z) + L1(x_hat, z)) + alpha * (L_stoi + L_stft)`
//!
//! with every gradient assembled exactly down to the perturbed samples.
//!
//! Mel bins are log energies, not distributions, so the KL term first maps
//! both arguments back through `exp`, floors, and normalizes them into joint
//! time–frequency distributions. The KL argument order is
//! KL(synthetic || noise).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{
    magnitude, magnitude_vjp, stft, stft_vjp, FftParams, MelParams, MelProjection,
    MelSpectrogram, Waveform, LOG_FLOOR,
};
use crate::error::{Error, Result};
use crate::metrics::stoi_loss_grad;
use crate::surrogate::{CondEmbedding, SurrogateModel};

/// Balance weights: `alpha` scales the perception term, `beta` the noise
/// concealment term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Sign with the zero subgradient at exact ties.
pub fn l1_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The Gaussian reference the synthesizer is steered toward. Sampled once
/// per protection run, RMS-matched to the protected clip, immutable after.
#[derive(Debug, Clone)]
pub struct NoiseReference {
    pub z: Waveform,
    pub z_mel: MelSpectrogram,
    pub seed: u64,
}

impl NoiseReference {
    pub fn for_clip(x: &Waveform, seed: u64, fft: &FftParams, mel: &MelParams) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..x.len())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let raw_rms = (raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
        let target_rms = x.rms();
        let scale = if raw_rms > 0.0 { target_rms / raw_rms } else { 0.0 };
        let z = Waveform::new(
            raw.iter().map(|v| v * scale).collect(),
            x.sample_rate,
            format!("{}-noise", x.id),
        );
        let z_mel = crate::dsp::mel_spectrogram(&z, fft, mel)?;
        Ok(Self { z, z_mel, seed })
    }
}

fn check_shapes(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// Mean absolute difference over all bins; gradients with respect to both
/// arguments.
pub fn mel_loss(
    a: &MelSpectrogram,
    b: &MelSpectrogram,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_shapes(&a.bins, &b.bins)?;
    let n = a.bins.len() as f64;
    let diff = &a.bins - &b.bins;
    let value = diff.mapv(f64::abs).sum() / n;
    let d_a = diff.mapv(|d| l1_sign(d) / n);
    let d_b = d_a.mapv(|g| -g);
    Ok((value, d_a, d_b))
}

/// KL divergence of two probability vectors, with the 0·ln 0 = 0 convention.
pub fn kl_from_probabilities(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi / qi.max(LOG_FLOOR)).ln()
            }
        })
        .sum()
}

/// A normalized joint time–frequency distribution built from log-mel bins,
/// with the pieces needed for the gradient chain.
struct MelDistribution {
    /// exp of the bins (pre-floor energies).
    raw: Array2<f64>,
    sum: f64,
    /// Probabilities.
    p: Array2<f64>,
}

impl MelDistribution {
    fn build(mel: &MelSpectrogram) -> Self {
        let raw = mel.bins.mapv(f64::exp);
        let floored = raw.mapv(|v| v.max(LOG_FLOOR));
        let sum = floored.sum();
        let p = floored.mapv(|v| v / sum);
        Self { raw, sum, p }
    }
}

/// KL divergence between the distributions induced by two mel spectrograms
/// (exponentiate, floor at 1e-10, normalize over all bins), with gradients
/// with respect to both log-mel arguments.
pub fn kl_divergence(
    p_mel: &MelSpectrogram,
    q_mel: &MelSpectrogram,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_shapes(&p_mel.bins, &q_mel.bins)?;
    let dp = MelDistribution::build(p_mel);
    let dq = MelDistribution::build(q_mel);

    let mut value = 0.0;
    for (pi, qi) in dp.p.iter().zip(dq.p.iter()) {
        value += pi * (pi / qi).ln();
    }

    // d KL / d p_mel_j = raw_j · [raw_j > floor] · (ln(P_j/Q_j) − KL) / S_p
    let mut d_p = Array2::zeros(dp.p.raw_dim());
    for ((f, m), g) in d_p.indexed_iter_mut() {
        let raw = dp.raw[[f, m]];
        if raw > LOG_FLOOR {
            let ratio = (dp.p[[f, m]] / dq.p[[f, m]]).ln();
            *g = raw * (ratio - value) / dp.sum;
        }
    }
    // d KL / d q_mel_j = raw_j · [raw_j > floor] · (1 − P_j/Q_j) / S_q
    let mut d_q = Array2::zeros(dq.p.raw_dim());
    for ((f, m), g) in d_q.indexed_iter_mut() {
        let raw = dq.raw[[f, m]];
        if raw > LOG_FLOOR {
            *g = raw * (1.0 - dp.p[[f, m]] / dq.p[[f, m]]) / dq.sum;
        }
    }
    Ok((value, d_p, d_q))
}

/// Concealment loss `KL(x_hat, z) + L1(x_hat, z)`; gradient with respect to
/// the synthetic mel only (the reference is fixed).
pub fn noise_loss(x_hat_mel: &MelSpectrogram, z_mel: &MelSpectrogram) -> Result<(f64, Array2<f64>)> {
    let (kl, d_kl, _) = kl_divergence(x_hat_mel, z_mel)?;
    let (l1, d_l1, _) = mel_loss(x_hat_mel, z_mel)?;
    Ok((kl + l1, d_kl + d_l1))
}

/// Weighted protection objective `L_mel + beta * L_noise`; gradients with
/// respect to the protected-audio mel and the synthetic mel.
pub fn spec_loss(
    x_prot_mel: &MelSpectrogram,
    x_hat_mel: &MelSpectrogram,
    z_mel: &MelSpectrogram,
    w: &LossWeights,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (mel, d_prot, d_hat_mel) = mel_loss(x_prot_mel, x_hat_mel)?;
    let (noise, d_hat_noise) = noise_loss(x_hat_mel, z_mel)?;
    let value = mel + w.beta * noise;
    let d_hat = &d_hat_mel + &d_hat_noise.mapv(|g| g * w.beta);
    Ok((value, d_prot, d_hat))
}

/// Frobenius norm of the magnitude-spectrogram difference, with the gradient
/// with respect to the protected audio.
pub fn stft_loss(x: &Waveform, x_prot: &Waveform) -> Result<(f64, Vec<f64>)> {
    stft_loss_with(x, x_prot, &FftParams::default())
}

/// [`stft_loss`] under explicit transform parameters.
pub fn stft_loss_with(x: &Waveform, x_prot: &Waveform, p: &FftParams) -> Result<(f64, Vec<f64>)> {
    if x.len() != x_prot.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", x.len()),
            got: format!("{} samples", x_prot.len()),
        });
    }
    let s_ref = stft(x, p)?;
    let m_ref = magnitude(&s_ref);
    let s_prot = stft(x_prot, p)?;
    let m_prot = magnitude(&s_prot);
    let diff = &m_prot.bins - &m_ref.bins;
    let value = diff.mapv(|d| d * d).sum().sqrt();
    if value == 0.0 {
        return Ok((0.0, vec![0.0; x_prot.len()]));
    }
    let d_mag = diff.mapv(|d| d / value);
    let (d_re, d_im) = magnitude_vjp(&s_prot, &m_prot, &d_mag);
    Ok((value, stft_vjp(&s_prot, &d_re, &d_im)))
}

/// Intelligibility penalty `1 - stoi` with its gradient; errors when the
/// clip is too short, so callers can fall back to the STFT term alone.
pub fn stoi_loss(x: &Waveform, x_prot: &Waveform) -> Result<(f64, Vec<f64>)> {
    stoi_loss_grad(x, x_prot)
}

/// Combined perception loss and gradient with respect to the protected
/// audio.
pub struct PerceptionLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub stft_term: f64,
    pub stoi_term: f64,
    /// Set when the clip was too short for STOI and only the STFT term ran.
    pub stoi_skipped: bool,
}

/// `L_stoi + L_stft`; falls back to the STFT term alone (flagged) when the
/// clip cannot carry a STOI estimate.
pub fn perception_loss(x: &Waveform, x_prot: &Waveform) -> Result<PerceptionLoss> {
    perception_loss_with(x, x_prot, &FftParams::default())
}

pub fn perception_loss_with(
    x: &Waveform,
    x_prot: &Waveform,
    p: &FftParams,
) -> Result<PerceptionLoss> {
    let (stft_term, mut grad) = stft_loss_with(x, x_prot, p)?;
    match stoi_loss(x, x_prot) {
        Ok((stoi_term, g_stoi)) => {
            for (g, s) in grad.iter_mut().zip(g_stoi.iter()) {
                *g += s;
            }
            Ok(PerceptionLoss {
                value: stft_term + stoi_term,
                grad,
                stft_term,
                stoi_term,
                stoi_skipped: false,
            })
        }
        Err(Error::StoiTooShort { .. }) => Ok(PerceptionLoss {
            value: stft_term,
            grad,
            stft_term,
            stoi_term: 0.0,
            stoi_skipped: true,
        }),
        Err(e) => Err(e),
    }
}

/// Which protection objective drives the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ObjectiveMode {
    /// Reconstruction loss only (the single fastest-converging objective).
    Pivotal,
    /// Reconstruction plus noise concealment.
    Spec,
    /// Multi-objective baseline: reconstruction + spectral convergence +
    /// per-frame KL regularizer, each term backpropagated separately the way
    /// a multi-task optimizer accumulates per-objective gradients.
    Vanilla,
}

/// Component toggles for the concealment term (ablation control; both on in
/// normal operation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpecComponents {
    pub kl: bool,
    pub l1: bool,
}

impl Default for SpecComponents {
    fn default() -> Self {
        Self { kl: true, l1: true }
    }
}

/// Loss component values of one composite evaluation.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mel: f64,
    pub noise_kl: f64,
    pub noise_l1: f64,
    pub stft: f64,
    pub stoi: f64,
    pub stoi_skipped: bool,
}

/// Full objective configuration for one evaluation.
pub struct ObjectiveConfig<'a> {
    pub mode: ObjectiveMode,
    pub components: SpecComponents,
    pub weights: LossWeights,
    pub perception: bool,
    /// Required for [`ObjectiveMode::Spec`].
    pub noise: Option<&'a NoiseReference>,
}

/// Evaluates the configured objective on protected audio and returns the
/// scalar, its exact gradient with respect to the protected samples, and the
/// component breakdown.
pub fn composite_loss(
    x: &Waveform,
    x_prot: &Waveform,
    model: &SurrogateModel,
    cond: &CondEmbedding,
    cfg: &ObjectiveConfig<'_>,
) -> Result<(f64, Vec<f64>, LossParts)> {
    cfg.weights.validate()?;
    let proj = MelProjection::new(&model.fft, &model.mel, x_prot.sample_rate);

    // One STFT feeds both the surrogate input and the mel target.
    let s_prot = stft(x_prot, &model.fft)?;
    let mag = magnitude(&s_prot);
    let mlp = model.forward_from_magnitude(&mag, cond);
    let x_hat = &mlp.output;
    let (energies, target_bins) = proj.forward(&mag.bins);
    let target = MelSpectrogram {
        bins: target_bins,
        params: model.mel,
    };

    let mut parts = LossParts::default();
    let mut d_wave = vec![0.0; x_prot.len()];

    let pull_through = |d_hat: &Array2<f64>, d_target: &Array2<f64>| -> Vec<f64> {
        let (_, d_mag_hat) = model.backward_from_magnitude(&mlp, d_hat);
        let d_mag_target = proj.vjp(&mag.bins, &energies, d_target);
        let d_mag = &d_mag_hat + &d_mag_target;
        let (d_re, d_im) = magnitude_vjp(&s_prot, &mag, &d_mag);
        stft_vjp(&s_prot, &d_re, &d_im)
    };

    match cfg.mode {
        ObjectiveMode::Pivotal | ObjectiveMode::Spec => {
            let (mel, d_target_mel, d_hat_mel) = mel_loss(&target, x_hat)?;
            parts.mel = mel;
            let mut value = mel;
            let mut d_hat = d_hat_mel;

            if cfg.mode == ObjectiveMode::Spec {
                let noise = cfg.noise.ok_or_else(|| {
                    Error::InvalidConfig("spec objective needs a noise reference".into())
                })?;
                if cfg.components.kl {
                    let (kl, d_kl, _) = kl_divergence(x_hat, &noise.z_mel)?;
                    parts.noise_kl = kl;
                    value += cfg.weights.beta * kl;
                    d_hat += &d_kl.mapv(|g| g * cfg.weights.beta);
                }
                if cfg.components.l1 {
                    let (l1, d_l1, _) = mel_loss(x_hat, &noise.z_mel)?;
                    parts.noise_l1 = l1;
                    value += cfg.weights.beta * l1;
                    d_hat += &d_l1.mapv(|g| g * cfg.weights.beta);
                }
            }
            parts.total = value;
            let g = pull_through(&d_hat, &d_target_mel);
            for (a, b) in d_wave.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
        ObjectiveMode::Vanilla => {
            // Term 1: reconstruction.
            let (mel, d_target_mel, d_hat_mel) = mel_loss(&target, x_hat)?;
            parts.mel = mel;
            let g1 = pull_through(&d_hat_mel, &d_target_mel);

            // Term 2: spectral convergence on mel energies.
            let e_hat = x_hat.bins.mapv(f64::exp);
            let e_ref = target.bins.mapv(f64::exp);
            let diff = &e_hat - &e_ref;
            let n_d = diff.mapv(|d| d * d).sum().sqrt();
            let n_r = e_ref.mapv(|d| d * d).sum().sqrt();
            let sc = if n_r > 0.0 { n_d / n_r } else { 0.0 };
            let g2 = if n_d > 0.0 && n_r > 0.0 {
                let d_e_hat = diff.mapv(|d| d / (n_d * n_r));
                let d_e_ref = ndarray::Zip::from(&diff)
                    .and(&e_ref)
                    .map_collect(|d, r| -d / (n_d * n_r) - n_d * r / (n_r * n_r * n_r));
                let d_hat_sc = &d_e_hat * &e_hat;
                let d_ref_sc = &d_e_ref * &e_ref;
                pull_through(&d_hat_sc, &d_ref_sc)
            } else {
                vec![0.0; x_prot.len()]
            };

            // Term 3: per-frame KL regularizer between prediction and target.
            let frames = x_hat.bins.nrows();
            let mut kl_total = 0.0;
            let mut d_hat_kl = Array2::zeros(x_hat.bins.raw_dim());
            let mut d_ref_kl = Array2::zeros(x_hat.bins.raw_dim());
            for f in 0..frames {
                let hat_f = MelSpectrogram {
                    bins: x_hat
                        .bins
                        .row(f)
                        .to_owned()
                        .insert_axis(ndarray::Axis(0)),
                    params: model.mel,
                };
                let ref_f = MelSpectrogram {
                    bins: target.bins.row(f).to_owned().insert_axis(ndarray::Axis(0)),
                    params: model.mel,
                };
                let (kl, d_p, d_q) = kl_divergence(&hat_f, &ref_f)?;
                kl_total += kl / frames as f64;
                for m in 0..x_hat.bins.ncols() {
                    d_hat_kl[[f, m]] = d_p[[0, m]] / frames as f64;
                    d_ref_kl[[f, m]] = d_q[[0, m]] / frames as f64;
                }
            }
            let g3 = pull_through(&d_hat_kl, &d_ref_kl);

            parts.noise_kl = kl_total;
            parts.total = mel + sc + kl_total;
            parts.noise_l1 = sc;
            for i in 0..d_wave.len() {
                d_wave[i] = g1[i] + g2[i] + g3[i];
            }
        }
    }

    if cfg.perception && cfg.weights.alpha > 0.0 {
        let perception = perception_loss_with(x, x_prot, &model.fft)?;
        parts.stft = perception.stft_term;
        parts.stoi = perception.stoi_term;
        parts.stoi_skipped = perception.stoi_skipped;
        parts.total += cfg.weights.alpha * perception.value;
        for (g, p) in d_wave.iter_mut().zip(perception.grad.iter()) {
            *g += cfg.weights.alpha * p;
        }
    }

    Ok((parts.total, d_wave, parts))
}

/// The full protection objective `L_SPEC + alpha * L_perception` and its
/// gradient with respect to the perturbation.
pub fn total_loss(
    x: &Waveform,
    x_prot: &Waveform,
    model: &SurrogateModel,
    cond: &CondEmbedding,
    noise: &NoiseReference,
    w: &LossWeights,
) -> Result<(f64, Vec<f64>, LossParts)> {
    composite_loss(
        x,
        x_prot,
        model,
        cond,
        &ObjectiveConfig {
            mode: ObjectiveMode::Spec,
            components: SpecComponents::default(),
            weights: *w,
            perception: true,
            noise: Some(noise),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::CANONICAL_RATE;

    fn random_mel(shape: (usize, usize), seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelSpectrogram {
            bins: Array2::from_shape_fn(shape, |_| rng.random_range(-4.0..2.0)),
            params: MelParams::new(shape.1, 0.0, 8000.0),
        }
    }

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.random_range(-0.8..0.8)).collect(),
            CANONICAL_RATE,
            "w",
        )
    }

    fn small_model(seed: u64) -> SurrogateModel {
        SurrogateModel::with_params(
            FftParams::new(64, 16, 64).unwrap(),
            MelParams::new(16, 0.0, 8000.0),
            CANONICAL_RATE,
            8,
            32,
            seed,
        )
    }

    #[test]
    fn mel_loss_cases() {
        let a = random_mel((3, 8), 1);
        let (zero, _, _) = mel_loss(&a, &a).unwrap();
        assert_eq!(zero, 0.0);

        let b = MelSpectrogram {
            bins: a.bins.mapv(|v| v + 1.0),
            params: a.params,
        };
        let (one, _, _) = mel_loss(&b, &a).unwrap();
        assert!((one - 1.0).abs() < 1e-12);

        // Brute-force elementwise oracle.
        let c = random_mel((3, 8), 2);
        let (got, _, _) = mel_loss(&a, &c).unwrap();
        let expect: f64 = a
            .bins
            .iter()
            .zip(c.bins.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 24.0;
        assert!((got - expect).abs() < 1e-9);

        let short = random_mel((2, 8), 3);
        assert!(mel_loss(&a, &short).is_err());
    }

    #[test]
    fn kl_identity_onehot_and_gibbs() {
        let a = random_mel((2, 4), 5);
        let (same, _, _) = kl_divergence(&a, &a).unwrap();
        assert!(same.abs() < 1e-12);

        // One-hot vs uniform over two bins: exactly ln 2 at the probability
        // level.
        let kl = kl_from_probabilities(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);

        // Gibbs' inequality on many random normalized pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.random_range(2..10usize);
            let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let sp: f64 = p.iter().sum();
            let sq: f64 = q.iter().sum();
            p.iter_mut().for_each(|v| *v /= sp);
            q.iter_mut().for_each(|v| *v /= sq);
            assert!(kl_from_probabilities(&p, &q) >= -1e-12);
        }
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let p = random_mel((2, 5), 11);
        let q = random_mel((2, 5), 12);
        let (_, d_p, d_q) = kl_divergence(&p, &q).unwrap();
        let h = 1e-6;
        for (f, m) in [(0usize, 0usize), (1, 2), (0, 4), (1, 4)] {
            let mut pp = p.clone();
            pp.bins[[f, m]] += h;
            let mut pm = p.clone();
            pm.bins[[f, m]] -= h;
            let fd = (kl_divergence(&pp, &q).unwrap().0 - kl_divergence(&pm, &q).unwrap().0)
                / (2.0 * h);
            let rel = (fd - d_p[[f, m]]).abs() / fd.abs().max(d_p[[f, m]].abs()).max(1e-9);
            assert!(rel < 1e-4, "d_p[{f},{m}]: fd {fd} vs {}", d_p[[f, m]]);

            let mut qp = q.clone();
            qp.bins[[f, m]] += h;
            let mut qm = q.clone();
            qm.bins[[f, m]] -= h;
            let fd = (kl_divergence(&p, &qp).unwrap().0 - kl_divergence(&p, &qm).unwrap().0)
                / (2.0 * h);
            let rel = (fd - d_q[[f, m]]).abs() / fd.abs().max(d_q[[f, m]].abs()).max(1e-9);
            assert!(rel < 1e-4, "d_q[{f},{m}]: fd {fd} vs {}", d_q[[f, m]]);
        }
    }

    #[test]
    fn noise_loss_composition_and_asymmetry() {
        let a = random_mel((3, 6), 21);
        let z = random_mel((3, 6), 22);
        let (same, _) = noise_loss(&a, &a).unwrap();
        assert!(same.abs() < 1e-12);

        let (value, _) = noise_loss(&a, &z).unwrap();
        let (kl, _, _) = kl_divergence(&a, &z).unwrap();
        let (l1, _, _) = mel_loss(&a, &z).unwrap();
        assert!((value - (kl + l1)).abs() < 1e-12);

        // KL asymmetry carries through.
        let (forward, _) = noise_loss(&a, &z).unwrap();
        let (reverse, _) = noise_loss(&z, &a).unwrap();
        assert!((forward - reverse).abs() > 1e-9);
    }

    #[test]
    fn spec_loss_reductions() {
        let prot = random_mel((3, 6), 31);
        let hat = random_mel((3, 6), 32);
        let z = random_mel((3, 6), 33);

        let zero_beta = LossWeights {
            alpha: 0.05,
            beta: 0.0,
        };
        let (v0, _, _) = spec_loss(&prot, &hat, &z, &zero_beta).unwrap();
        let (mel, _, _) = mel_loss(&prot, &hat).unwrap();
        assert!((v0 - mel).abs() < 1e-12);

        // Affine in beta: value(2) - value(1) = noise loss.
        let w1 = LossWeights {
            alpha: 0.05,
            beta: 1.0,
        };
        let w2 = LossWeights {
            alpha: 0.05,
            beta: 2.0,
        };
        let (v1, _, _) = spec_loss(&prot, &hat, &z, &w1).unwrap();
        let (v2, _, _) = spec_loss(&prot, &hat, &z, &w2).unwrap();
        let (noise, _) = noise_loss(&hat, &z).unwrap();
        assert!((v2 - v1 - noise).abs() < 1e-9);

        // Paper defaults.
        let w = LossWeights::default();
        assert_eq!(w.beta, 10.0);
        assert_eq!(w.alpha, 0.05);
    }

    #[test]
    fn stft_loss_behaviour() {
        let p = FftParams::new(64, 16, 64).unwrap();
        let x = random_wave(512, 41);
        let (zero, g) = stft_loss_with(&x, &x, &p).unwrap();
        assert_eq!(zero, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));

        // First-order scaling: doubling a small delta ~doubles the loss.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let delta: Vec<f64> = (0..512).map(|_| rng.random_range(-1e-4..1e-4)).collect();
        let x1 = Waveform::new(
            x.samples.iter().zip(&delta).map(|(a, d)| a + d).collect(),
            CANONICAL_RATE,
            "x1",
        );
        let x2 = Waveform::new(
            x.samples
                .iter()
                .zip(&delta)
                .map(|(a, d)| a + 2.0 * d)
                .collect(),
            CANONICAL_RATE,
            "x2",
        );
        let (l1, _) = stft_loss_with(&x, &x1, &p).unwrap();
        let (l2, _) = stft_loss_with(&x, &x2, &p).unwrap();
        let ratio = l2 / l1;
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");

        // Independent two-pass recomputation.
        let s_a = stft(&x, &p).unwrap();
        let s_b = stft(&x1, &p).unwrap();
        let (ma, mb) = (magnitude(&s_a), magnitude(&s_b));
        let expect = (&mb.bins - &ma.bins).mapv(|d| d * d).sum().sqrt();
        assert!((l1 - expect).abs() < 1e-12);

        let shorter = random_wave(256, 43);
        assert!(stft_loss_with(&x, &shorter, &p).is_err());
    }

    #[test]
    fn perception_fallback_flags_short_clips() {
        let p = FftParams::new(64, 16, 64).unwrap();
        // 100 ms at 16 kHz: too short for STOI, fine for STFT.
        let x = random_wave(1600, 51);
        let y = random_wave(1600, 52);
        let res = perception_loss_with(&x, &y, &p).unwrap();
        assert!(res.stoi_skipped);
        assert_eq!(res.stoi_term, 0.0);
        assert!(res.value > 0.0);

        let (identical, g) = stft_loss_with(&x, &x, &p).unwrap();
        assert_eq!(identical, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let model = small_model(61);
        let cond = CondEmbedding::from_speaker("fd", 8);
        let x = random_wave(512, 62);
        let noise = NoiseReference::for_clip(&x, 63, &model.fft, &model.mel).unwrap();
        let w = LossWeights::default();

        let delta0: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(64);
            (0..512).map(|_| rng.random_range(-0.02..0.02)).collect()
        };
        let apply = |d: &[f64]| {
            Waveform::new(
                x.samples.iter().zip(d).map(|(a, b)| a + b).collect(),
                CANONICAL_RATE,
                "prot",
            )
        };
        let (_, grad, parts) = total_loss(&x, &apply(&delta0), &model, &cond, &noise, &w).unwrap();
        assert!(parts.stoi_skipped, "512 samples cannot carry STOI");

        let f = |d: &[f64]| total_loss(&x, &apply(d), &model, &cond, &noise, &w).unwrap().0;
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        // Directional checks cover all coordinates jointly.
        for _ in 0..3 {
            let dir: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dp = delta0.clone();
            let mut dm = delta0.clone();
            for i in 0..512 {
                dp[i] += h * dir[i];
                dm[i] -= h * dir[i];
            }
            let fd = (f(&dp) - f(&dm)) / (2.0 * h);
            let an: f64 = grad.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            assert!(rel < 1e-4, "directional fd {fd} vs analytic {an}");
        }
        // And a few pointwise coordinates.
        for idx in [3usize, 100, 300, 511] {
            let mut dp = delta0.clone();
            dp[idx] += h;
            let mut dm = delta0.clone();
            dm[idx] -= h;
            let fd = (f(&dp) - f(&dm)) / (2.0 * h);
            let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-12);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn total_loss_reduces_to_spec_at_alpha_zero() {
        let model = small_model(71);
        let cond = CondEmbedding::from_speaker("a0", 8);
        let x = random_wave(512, 72);
        let x_prot = random_wave(512, 73);
        let noise = NoiseReference::for_clip(&x, 74, &model.fft, &model.mel).unwrap();

        let w0 = LossWeights {
            alpha: 0.0,
            beta: 10.0,
        };
        let cfg_perception = ObjectiveConfig {
            mode: ObjectiveMode::Spec,
            components: SpecComponents::default(),
            weights: w0,
            perception: true,
            noise: Some(&noise),
        };
        let cfg_bare = ObjectiveConfig {
            perception: false,
            ..cfg_perception
        };
        let (with_p, _, _) = composite_loss(&x, &x_prot, &model, &cond, &cfg_perception).unwrap();
        let (bare, _, _) = composite_loss(&x, &x_prot, &model, &cond, &cfg_bare).unwrap();
        assert_eq!(with_p, bare, "alpha = 0 must reduce to the spec objective");
    }

    #[test]
    fn vanilla_mode_evaluates_three_terms() {
        let model = small_model(81);
        let cond = CondEmbedding::from_speaker("v", 8);
        let x = random_wave(512, 82);
        let x_prot = random_wave(512, 83);
        let cfg = ObjectiveConfig {
            mode: ObjectiveMode::Vanilla,
            components: SpecComponents::default(),
            weights: LossWeights {
                alpha: 0.0,
                beta: 0.0,
            },
            perception: false,
            noise: None,
        };
        let (value, grad, parts) = composite_loss(&x, &x_prot, &model, &cond, &cfg).unwrap();
        assert!(value > 0.0);
        assert!(parts.mel > 0.0);
        assert!(grad.iter().any(|g| *g != 0.0));

        // Vanilla gradient must also be exact.
        let f = |w: &Waveform| composite_loss(&x, w, &model, &cond, &cfg).unwrap().0;
        let h = 1e-6;
        for idx in [10usize, 200, 400] {
            let mut xp = x_prot.clone();
            xp.samples[idx] += h;
            let mut xm = x_prot.clone();
            xm.samples[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-12);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn noise_reference_matches_rms_and_is_seeded() {
        let x = random_wave(2048, 91);
        let p = FftParams::new(64, 16, 64).unwrap();
        let m = MelParams::new(16, 0.0, 8000.0);
        let a = NoiseReference::for_clip(&x, 7, &p, &m).unwrap();
        let b = NoiseReference::for_clip(&x, 7, &p, &m).unwrap();
        let c = NoiseReference::for_clip(&x, 8, &p, &m).unwrap();
        assert_eq!(a.z.samples, b.z.samples);
        assert_ne!(a.z.samples, c.z.samples);
        assert!((a.z.rms() - x.rms()).abs() < 1e-12);
    }
}
