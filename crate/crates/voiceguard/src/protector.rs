//! Perturbation generation: iterate the protection objective and take
//! projected signed-gradient steps inside the epsilon ball.
//!
//! The update is `delta <- clamp(delta - step * sign(grad), -eps, eps)`, the
//! standard error-minimizing-noise step; it keeps the perception term's
//! influence alive. A literal variant that rewrites delta to
//! `clamp(-sign(grad), -eps, eps)` each epoch is available behind
//! [`UpdateRule::LiteralSign`] for comparison — it is bang-bang and ignores
//! step size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, SIM_THRESHOLD};
use crate::objectives::{
    l1_sign, LossWeights, NoiseReference, ObjectiveConfig, ObjectiveMode, SpecComponents,
};
use crate::surrogate::{CondEmbedding, SurrogateModel};

/// Default perturbation radius (the 8/255 convention on [-1, 1] amplitudes).
pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;

/// How the per-epoch update uses the gradient sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpdateRule {
    /// `delta - step * sign(grad)`, projected back into the ball.
    ProjectedStep,
    /// Literal rewrite to `clamp(-sign(grad), -eps, eps)` every epoch.
    LiteralSign,
}

/// Hyperparameters of one protection run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerturbationConfig {
    pub epsilon: f64,
    pub max_epoch: usize,
    pub weights: LossWeights,
    pub perception_enabled: bool,
    pub step_size: f64,
    pub seed: u64,
    pub mode: ObjectiveMode,
    /// Concealment-term toggles, ablation only; both on by default.
    pub components: SpecComponents,
    pub update_rule: UpdateRule,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_epoch: 100,
            weights: LossWeights::default(),
            perception_enabled: true,
            step_size: DEFAULT_EPSILON / 10.0,
            seed: 0,
            mode: ObjectiveMode::Spec,
            components: SpecComponents::default(),
            update_rule: UpdateRule::ProjectedStep,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} outside (0, 1]",
                self.epsilon
            )));
        }
        if self.max_epoch == 0 {
            return Err(Error::InvalidConfig("max_epoch must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "step_size {} outside (0, epsilon]",
                self.step_size
            )));
        }
        self.weights.validate()
    }

    /// Seed for the clip at `index` in a batch run.
    pub fn seed_for(&self, index: usize) -> u64 {
        self.seed
            .wrapping_add((index as u64).wrapping_mul(0x9E3779B97F4A7C15))
    }
}

/// Protected audio plus the provenance needed to reproduce and audit it.
#[derive(Debug, Clone)]
pub struct ProtectedAudio {
    pub x_prot: Waveform,
    pub delta: Vec<f64>,
    pub config: PerturbationConfig,
    /// Objective value at the start of each epoch.
    pub loss_trace: Vec<f64>,
    /// max |delta| after each epoch's update (ball soundness evidence).
    pub delta_max_trace: Vec<f64>,
    pub noise_seed: u64,
    /// Epochs whose masked gradient was identically zero (recorded, not
    /// fatal).
    pub zero_grad_epochs: Vec<usize>,
}

pub(crate) fn init_delta(len: usize, epsilon: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-epsilon..epsilon)).collect()
}

fn noise_seed_for(seed: u64) -> u64 {
    seed ^ 0x9E3779B97F4A7C15
}

/// Runs the perturbation loop on one clip against a pre-trained surrogate.
/// Deterministic for a fixed `(x, model, cond, cfg)`.
pub fn generate_perturbation(
    x: &Waveform,
    model: &SurrogateModel,
    cond: &CondEmbedding,
    cfg: &PerturbationConfig,
) -> Result<ProtectedAudio> {
    cfg.validate()?;
    let noise_seed = noise_seed_for(cfg.seed);
    let noise = NoiseReference::for_clip(x, noise_seed, &model.fft, &model.mel)?;
    let objective = ObjectiveConfig {
        mode: cfg.mode,
        components: cfg.components,
        weights: cfg.weights,
        perception: cfg.perception_enabled,
        noise: Some(&noise),
    };

    let mut delta = init_delta(x.len(), cfg.epsilon, cfg.seed);
    let mut loss_trace = Vec::with_capacity(cfg.max_epoch);
    let mut delta_max_trace = Vec::with_capacity(cfg.max_epoch);
    let mut zero_grad_epochs = Vec::new();

    for epoch in 0..cfg.max_epoch {
        let x_prot = apply_delta(x, &delta);
        let (loss, grad, _) =
            crate::objectives::composite_loss(x, &x_prot, model, cond, &objective)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, value: loss });
        }
        loss_trace.push(loss);

        // Pass-through clip gradient: zero where x + delta left [-1, 1].
        let mut all_zero = true;
        let masked: Vec<f64> = x
            .samples
            .iter()
            .zip(delta.iter())
            .zip(grad.iter())
            .map(|((xi, di), gi)| {
                let g = if (xi + di).abs() <= 1.0 { *gi } else { 0.0 };
                if g != 0.0 {
                    all_zero = false;
                }
                g
            })
            .collect();
        if all_zero {
            zero_grad_epochs.push(epoch);
        }

        match cfg.update_rule {
            UpdateRule::ProjectedStep => {
                for (d, g) in delta.iter_mut().zip(masked.iter()) {
                    *d = (*d - cfg.step_size * l1_sign(*g)).clamp(-cfg.epsilon, cfg.epsilon);
                }
            }
            UpdateRule::LiteralSign => {
                for (d, g) in delta.iter_mut().zip(masked.iter()) {
                    *d = (-l1_sign(*g)).clamp(-cfg.epsilon, cfg.epsilon);
                }
            }
        }
        let max_abs = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        debug_assert!(max_abs <= cfg.epsilon);
        delta_max_trace.push(max_abs);
    }

    Ok(ProtectedAudio {
        x_prot: apply_delta(x, &delta).relabel(format!("{}-protected", x.id)),
        delta,
        config: *cfg,
        loss_trace,
        delta_max_trace,
        noise_seed,
        zero_grad_epochs,
    })
}

fn apply_delta(x: &Waveform, delta: &[f64]) -> Waveform {
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

/// Protects a batch of clips independently (no cross-clip averaging); clip
/// `i` derives its seed from `cfg.seed_for(i)`. Parallel but order-stable.
pub fn protect_batch(
    clips: &[(Waveform, CondEmbedding)],
    model: &SurrogateModel,
    cfg: &PerturbationConfig,
) -> Result<Vec<ProtectedAudio>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(i, (x, cond))| {
            let clip_cfg = PerturbationConfig {
                seed: cfg.seed_for(i),
                ..*cfg
            };
            generate_perturbation(x, model, cond, &clip_cfg)
        })
        .collect()
}

/// A perturbation optimized on one clip and reusable on others by tiling or
/// truncation.
#[derive(Debug, Clone)]
pub struct UniversalPerturbation {
    pub template: Vec<f64>,
    pub config: PerturbationConfig,
    pub noise_seed: u64,
}

/// Optimizes a perturbation on the first clip of the list.
pub fn generate_universal_perturbation(
    clips: &[Waveform],
    model: &SurrogateModel,
    cond: &CondEmbedding,
    cfg: &PerturbationConfig,
) -> Result<UniversalPerturbation> {
    let first = clips
        .first()
        .ok_or_else(|| Error::EmptyInput("universal perturbation needs >= 1 clip".into()))?;
    let prot = generate_perturbation(first, model, cond, cfg)?;
    Ok(UniversalPerturbation {
        template: prot.delta,
        config: prot.config,
        noise_seed: prot.noise_seed,
    })
}

impl UniversalPerturbation {
    /// Tiles (or truncates) the template onto a clip of any length; the ball
    /// bound survives tiling unchanged.
    pub fn apply(&self, x: &Waveform) -> ProtectedAudio {
        let delta: Vec<f64> = (0..x.len())
            .map(|i| self.template[i % self.template.len()])
            .collect();
        ProtectedAudio {
            x_prot: apply_delta(x, &delta).relabel(format!("{}-protected", x.id)),
            delta,
            config: self.config,
            loss_trace: Vec::new(),
            delta_max_trace: Vec::new(),
            noise_seed: self.noise_seed,
            zero_grad_epochs: Vec::new(),
        }
    }
}

/// Post-run hyperparameter advice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Recommendation {
    Accept,
    RaiseEpsilon,
    RaiseEpochs,
}

/// Converged when the mean of the last ten epochs dropped below 90% of the
/// first ten.
pub fn trace_converged(trace: &[f64]) -> bool {
    if trace.len() < 20 {
        return false;
    }
    let first: f64 = trace[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
    last <= 0.9 * first
}

/// Rule table: a still-cloneable voice needs a wider ball; an unconverged
/// trace needs more epochs; otherwise ship it.
pub fn evaluate_and_retune(prot: &ProtectedAudio, report: &MetricReport) -> Recommendation {
    if report.sim > SIM_THRESHOLD {
        Recommendation::RaiseEpsilon
    } else if !trace_converged(&prot.loss_trace) {
        Recommendation::RaiseEpochs
    } else {
        Recommendation::Accept
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{FftParams, MelParams, CANONICAL_RATE};

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

    fn tone_clip(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.random_range(120.0..260.0);
        Waveform::new(
            (0..len)
                .map(|i| {
                    let t = i as f64 / CANONICAL_RATE as f64;
                    0.4 * (2.0 * std::f64::consts::PI * f0 * t).sin()
                        + 0.2 * (2.0 * std::f64::consts::PI * 2.0 * f0 * t).sin()
                })
                .collect(),
            CANONICAL_RATE,
            "tone",
        )
    }

    fn quick_cfg(mode: ObjectiveMode) -> PerturbationConfig {
        PerturbationConfig {
            max_epoch: 4,
            perception_enabled: false,
            mode,
            seed: 11,
            ..PerturbationConfig::default()
        }
    }

    #[test]
    fn ball_bound_holds_every_epoch() {
        let model = small_model(1);
        let cond = CondEmbedding::from_speaker("b", 8);
        let x = tone_clip(800, 2);
        for mode in [
            ObjectiveMode::Pivotal,
            ObjectiveMode::Spec,
            ObjectiveMode::Vanilla,
        ] {
            let prot = generate_perturbation(&x, &model, &cond, &quick_cfg(mode)).unwrap();
            let eps = prot.config.epsilon;
            assert!(prot.delta.iter().all(|d| d.abs() <= eps));
            assert!(prot.delta_max_trace.iter().all(|m| *m <= eps));
            assert_eq!(prot.delta.len(), x.len());
            // x_prot stays in [-1, 1].
            assert!(prot.x_prot.samples.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn zero_epochs_rejected_one_epoch_moves_at_most_step() {
        let model = small_model(3);
        let cond = CondEmbedding::from_speaker("s", 8);
        let x = tone_clip(800, 4);
        let bad = PerturbationConfig {
            max_epoch: 0,
            ..PerturbationConfig::default()
        };
        assert!(generate_perturbation(&x, &model, &cond, &bad).is_err());

        let one = PerturbationConfig {
            max_epoch: 1,
            perception_enabled: false,
            seed: 5,
            ..PerturbationConfig::default()
        };
        let prot = generate_perturbation(&x, &model, &cond, &one).unwrap();
        let d0 = init_delta(x.len(), one.epsilon, one.seed);
        let max_move = prot
            .delta
            .iter()
            .zip(d0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            max_move <= one.step_size + 1e-15,
            "single epoch moved {max_move}"
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let model = small_model(7);
        let cond = CondEmbedding::from_speaker("d", 8);
        let x = tone_clip(800, 8);
        let cfg = quick_cfg(ObjectiveMode::Spec);
        let a = generate_perturbation(&x, &model, &cond, &cfg).unwrap();
        let b = generate_perturbation(&x, &model, &cond, &cfg).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.x_prot.samples, b.x_prot.samples);
    }

    #[test]
    fn literal_rule_is_bang_bang() {
        let model = small_model(9);
        let cond = CondEmbedding::from_speaker("l", 8);
        let x = tone_clip(800, 10);
        let cfg = PerturbationConfig {
            update_rule: UpdateRule::LiteralSign,
            ..quick_cfg(ObjectiveMode::Pivotal)
        };
        let prot = generate_perturbation(&x, &model, &cond, &cfg).unwrap();
        let eps = cfg.epsilon;
        assert!(prot
            .delta
            .iter()
            .all(|d| *d == 0.0 || (d.abs() - eps).abs() < 1e-15));
    }

    #[test]
    fn loss_descends_on_a_real_run() {
        let model = small_model(13);
        let cond = CondEmbedding::from_speaker("run", 8);
        let x = tone_clip(1200, 14);
        let cfg = PerturbationConfig {
            max_epoch: 30,
            perception_enabled: false,
            mode: ObjectiveMode::Pivotal,
            seed: 15,
            ..PerturbationConfig::default()
        };
        let prot = generate_perturbation(&x, &model, &cond, &cfg).unwrap();
        let first = prot.loss_trace[0];
        let last = *prot.loss_trace.last().unwrap();
        assert!(last < first, "loss did not descend: {first} -> {last}");
    }

    #[test]
    fn universal_template_tiles_and_respects_ball() {
        let model = small_model(17);
        let cond = CondEmbedding::from_speaker("u", 8);
        let clips = vec![tone_clip(800, 18), tone_clip(2000, 19)];
        let cfg = quick_cfg(ObjectiveMode::Pivotal);
        let uni = generate_universal_perturbation(&clips, &model, &cond, &cfg).unwrap();

        // Equal length: direct addition of the template.
        let same = uni.apply(&clips[0]);
        for i in 0..clips[0].len() {
            let expect = (clips[0].samples[i] + uni.template[i]).clamp(-1.0, 1.0);
            assert_eq!(same.x_prot.samples[i], expect);
        }

        // A 2.5x clip: tiled three times then truncated, bound preserved.
        let long = uni.apply(&clips[1]);
        assert_eq!(long.delta.len(), 2000);
        assert!(long.delta.iter().all(|d| d.abs() <= cfg.epsilon));
        assert_eq!(long.delta[800], uni.template[0]);
        assert_eq!(long.delta[1999], uni.template[1999 % 800]);
        assert!(generate_universal_perturbation(&[], &model, &cond, &cfg).is_err());
    }

    #[test]
    fn retune_rule_table() {
        let mk_prot = |trace: Vec<f64>| ProtectedAudio {
            x_prot: tone_clip(800, 20),
            delta: vec![0.0; 800],
            config: PerturbationConfig::default(),
            loss_trace: trace,
            delta_max_trace: vec![],
            noise_seed: 0,
            zero_grad_epochs: vec![],
        };
        let converged: Vec<f64> = (0..100).map(|i| 10.0 / (1.0 + i as f64)).collect();
        let flat = vec![5.0; 100];
        let report = |sim: f64| MetricReport::new(10.0, 20.0, sim, 0.9, None);

        assert_eq!(
            evaluate_and_retune(&mk_prot(converged.clone()), &report(0.10)),
            Recommendation::Accept
        );
        assert_eq!(
            evaluate_and_retune(&mk_prot(converged), &report(0.40)),
            Recommendation::RaiseEpsilon
        );
        assert_eq!(
            evaluate_and_retune(&mk_prot(flat), &report(0.10)),
            Recommendation::RaiseEpochs
        );
    }
}
