//! End-to-end experiment drivers.
//!
//! The flow mirrors how an attack would unfold: pre-train the surrogate on a
//! background corpus, protect the victim's training split, fine-tune a fresh
//! copy of the surrogate on that (possibly protected) data, synthesize the
//! test split, and score the synthesis against ground truth. Robustness and
//! ablation suites wrap the same loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{augment, default_rho_grid, spectral_gate_denoise, AugmentationSpec};
use crate::dsp::{mel_spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::metrics::{
    attack_success_rate, mcd_dtw_from_logmel, snr_db, speaker_sim_from_logmel, stoi_score,
    SIM_THRESHOLD,
};
use crate::objectives::{ObjectiveMode, SpecComponents};
use crate::protector::{generate_perturbation, protect_batch, PerturbationConfig};
use crate::surrogate::{CondEmbedding, SurrogateModel};

pub const DEFAULT_PRETRAIN_STEPS: usize = 200;
pub const DEFAULT_TRAIN_STEPS: usize = 200;
/// Gradient-descent rate for surrogate training. Mean-reduced L1 gradients
/// are bounded by 1/n_bins, so the usable rate is of order one.
pub const DEFAULT_LR: f64 = 2.0;

/// Which split a corpus entry belongs to (80/20 protocol).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One row of the on-disk corpus description (JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: String,
    pub speaker_id: String,
    pub text: String,
    pub split: Split,
}

/// The corpus description file: one JSON object per line.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::Report(format!("manifest line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }
}

/// An in-memory clip with its labels.
#[derive(Debug, Clone)]
pub struct Clip {
    pub wave: Waveform,
    pub speaker: String,
    pub text: String,
    pub split: Split,
}

/// The working corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub clips: Vec<Clip>,
}

impl Corpus {
    /// Generates `n_speakers x clips_per_speaker` synthetic clips with a
    /// per-speaker 80/20 train/test split.
    pub fn generate(
        seed: u64,
        speaker_prefix: &str,
        n_speakers: usize,
        clips_per_speaker: usize,
        clip_len: usize,
    ) -> Self {
        let mut clips = Vec::with_capacity(n_speakers * clips_per_speaker);
        for s in 0..n_speakers {
            let n_train = ((clips_per_speaker as f64 * 0.8).round() as usize)
                .clamp(1, clips_per_speaker.saturating_sub(1).max(1));
            for c in 0..clips_per_speaker {
                let wave = crate::synth::generate_clip(seed, s, c, clip_len);
                clips.push(Clip {
                    wave,
                    speaker: format!("{speaker_prefix}{s:02}"),
                    text: format!("synthetic utterance {c} of speaker {s}"),
                    split: if c < n_train { Split::Train } else { Split::Test },
                });
            }
        }
        Self { clips }
    }

    /// Loads every manifest entry from disk (resampling to 16 kHz).
    pub fn from_manifest(manifest: &CorpusManifest) -> Result<Self> {
        let mut clips = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let (wave, _) = crate::wav::load_wav(Path::new(&e.audio_path))?;
            clips.push(Clip {
                wave,
                speaker: e.speaker_id.clone(),
                text: e.text.clone(),
                split: e.split,
            });
        }
        Ok(Self { clips })
    }

    /// Writes WAV files plus a manifest under `dir`.
    pub fn materialize(&self, dir: &Path) -> Result<CorpusManifest> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.clips.len());
        for clip in &self.clips {
            let path = dir.join(format!("{}.wav", clip.wave.id));
            crate::wav::save_wav(&clip.wave, &path)?;
            entries.push(ManifestEntry {
                audio_path: path.to_string_lossy().into_owned(),
                speaker_id: clip.speaker.clone(),
                text: clip.text.clone(),
                split: clip.split,
            });
        }
        let manifest = CorpusManifest { entries };
        manifest.save(&dir.join("manifest.jsonl"))?;
        Ok(manifest)
    }

    pub fn train_clips(&self) -> Vec<&Clip> {
        self.clips.iter().filter(|c| c.split == Split::Train).collect()
    }

    pub fn test_clips(&self) -> Vec<&Clip> {
        self.clips.iter().filter(|c| c.split == Split::Test).collect()
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut v: Vec<String> = self.clips.iter().map(|c| c.speaker.clone()).collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Scale and seed knobs shared by the experiment drivers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub protect: PerturbationConfig,
    pub pretrain_steps: usize,
    pub train_steps: usize,
    pub lr: f64,
    /// External MP3 round-trip command template with `{in}`/`{out}`
    /// placeholders; the MP3 robustness row is skipped when absent.
    pub mp3_roundtrip_cmd: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            protect: PerturbationConfig::default(),
            pretrain_steps: DEFAULT_PRETRAIN_STEPS,
            train_steps: DEFAULT_TRAIN_STEPS,
            lr: DEFAULT_LR,
            mp3_roundtrip_cmd: None,
        }
    }
}

/// Training-data condition under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    RandomNoise,
    Pivotal,
    Spec,
    SpecPerception,
}

impl Condition {
    pub fn all() -> Vec<Condition> {
        vec![
            Condition::Clean,
            Condition::RandomNoise,
            Condition::Pivotal,
            Condition::Spec,
            Condition::SpecPerception,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::RandomNoise => "random_noise",
            Condition::Pivotal => "pivotal",
            Condition::Spec => "spec",
            Condition::SpecPerception => "spec+perception",
        }
    }
}

/// Post-training synthesis scores for one test clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRow {
    pub clip: String,
    pub speaker: String,
    pub sim: f64,
    pub mcd: f64,
    pub attack_success: bool,
}

/// Per-condition aggregates; always recomputable from the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_sim: f64,
    pub mean_mcd: f64,
    pub asr_pct: f64,
    /// Protection-side stats (absent for the clean condition).
    pub mean_snr_db: Option<f64>,
    pub mean_stoi: Option<f64>,
}

pub fn aggregate_rows(rows: &[ClipRow], snr: Option<f64>, stoi: Option<f64>) -> Result<Aggregates> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("no evaluation rows".into()));
    }
    let sims: Vec<f64> = rows.iter().map(|r| r.sim).collect();
    Ok(Aggregates {
        mean_sim: sims.iter().sum::<f64>() / sims.len() as f64,
        mean_mcd: rows.iter().map(|r| r.mcd).sum::<f64>() / rows.len() as f64,
        asr_pct: attack_success_rate(&sims)?,
        mean_snr_db: snr,
        mean_stoi: stoi,
    })
}

/// Wall-clock accounting; never part of determinism comparisons.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timing {
    pub protect_s: f64,
    pub train_s: f64,
    pub evaluate_s: f64,
}

/// Everything one condition run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub condition: String,
    pub rows: Vec<ClipRow>,
    pub aggregates: Aggregates,
    pub final_train_loss: f64,
    pub seed: u64,
    pub timing: Timing,
}

impl ExperimentReport {
    /// Aggregate/row consistency invariant.
    pub fn verify(&self) -> Result<()> {
        let recomputed = aggregate_rows(
            &self.rows,
            self.aggregates.mean_snr_db,
            self.aggregates.mean_stoi,
        )?;
        if recomputed != self.aggregates {
            return Err(Error::Report(format!(
                "aggregates diverge from rows in condition {}",
                self.condition
            )));
        }
        Ok(())
    }
}

fn cond_for(model: &SurrogateModel, speaker: &str) -> CondEmbedding {
    CondEmbedding::from_speaker(speaker, model.cond_dim)
}

/// Trains a fresh surrogate on the corpus' clean train split.
pub fn pretrain_surrogate(
    corpus: &Corpus,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(SurrogateModel, Vec<f64>)> {
    let train = corpus.train_clips();
    if train.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus is empty".into()));
    }
    if train.len() < 8 {
        return Err(Error::InvalidConfig(format!(
            "pretraining needs >= 8 training clips, got {}",
            train.len()
        )));
    }
    let mut model = SurrogateModel::init(seed);
    let batch: Vec<(Waveform, CondEmbedding)> = train
        .iter()
        .map(|c| (c.wave.clone(), cond_for(&model, &c.speaker)))
        .collect();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(model.train_step(&batch, lr)?);
    }
    Ok((model, losses))
}

/// Fine-tunes a copy of the checkpoint on the given clips.
pub fn fine_tune(
    checkpoint: &SurrogateModel,
    clips: &[(Waveform, CondEmbedding)],
    steps: usize,
    lr: f64,
) -> Result<(SurrogateModel, Vec<f64>)> {
    let mut model = checkpoint.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(model.train_step(clips, lr)?);
    }
    Ok((model, losses))
}

/// Synthesizes every test clip and scores it against ground truth.
pub fn evaluate_synthesis(model: &SurrogateModel, test: &[&Clip]) -> Result<Vec<ClipRow>> {
    test.par_iter()
        .map(|clip| {
            let truth = mel_spectrogram(&clip.wave, &model.fft, &model.mel)?;
            let synth = model.predict(&clip.wave, &cond_for(model, &clip.speaker))?;
            let sim = speaker_sim_from_logmel(&synth, &truth)?;
            let mcd = mcd_dtw_from_logmel(&synth, &truth)?;
            Ok(ClipRow {
                clip: clip.wave.id.clone(),
                speaker: clip.speaker.clone(),
                sim,
                mcd,
                attack_success: sim > SIM_THRESHOLD,
            })
        })
        .collect()
}

/// Protection-side stats of a prepared training set.
fn protection_stats(
    originals: &[&Clip],
    prepared: &[(Waveform, CondEmbedding)],
) -> (Option<f64>, Option<f64>) {
    let mut snrs = Vec::new();
    let mut stois = Vec::new();
    for (clip, (protected, _)) in originals.iter().zip(prepared.iter()) {
        let delta: Vec<f64> = protected
            .samples
            .iter()
            .zip(clip.wave.samples.iter())
            .map(|(p, x)| p - x)
            .collect();
        if let Ok(snr) = snr_db(&clip.wave, &delta) {
            if !snr.delta_silent {
                snrs.push(snr.db);
            }
        }
        if let Ok(s) = stoi_score(&clip.wave, protected) {
            stois.push(s);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    (mean(&snrs), mean(&stois))
}

/// Produces the training waveforms for a condition: clean, uniform noise in
/// the ball, or protected by the chosen objective.
pub fn prepare_condition(
    train: &[&Clip],
    condition: Condition,
    model: &SurrogateModel,
    cfg: &ExperimentConfig,
) -> Result<Vec<(Waveform, CondEmbedding)>> {
    let base = PerturbationConfig {
        seed: cfg.seed,
        ..cfg.protect
    };
    match condition {
        Condition::Clean => Ok(train
            .iter()
            .map(|c| (c.wave.clone(), cond_for(model, &c.speaker)))
            .collect()),
        Condition::RandomNoise => Ok(train
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut rng = ChaCha8Rng::seed_from_u64(base.seed_for(i));
                let eps = base.epsilon;
                let wave = Waveform::new(
                    c.wave
                        .samples
                        .iter()
                        .map(|v| (v + rng.random_range(-eps..eps)).clamp(-1.0, 1.0))
                        .collect(),
                    c.wave.sample_rate,
                    c.wave.id.clone(),
                );
                (wave, cond_for(model, &c.speaker))
            })
            .collect()),
        Condition::Pivotal | Condition::Spec | Condition::SpecPerception => {
            let mode = if condition == Condition::Pivotal {
                ObjectiveMode::Pivotal
            } else {
                ObjectiveMode::Spec
            };
            let protect_cfg = PerturbationConfig {
                mode,
                perception_enabled: condition == Condition::SpecPerception,
                ..base
            };
            let inputs: Vec<(Waveform, CondEmbedding)> = train
                .iter()
                .map(|c| (c.wave.clone(), cond_for(model, &c.speaker)))
                .collect();
            let protected = protect_batch(&inputs, model, &protect_cfg)?;
            Ok(train
                .iter()
                .zip(protected.into_iter())
                .map(|(c, p)| (p.x_prot, cond_for(model, &c.speaker)))
                .collect())
        }
    }
}

/// The central comparison: protect the train split per condition, fine-tune
/// a fresh surrogate copy, synthesize the test split, and score it.
pub fn run_unlearnability_experiment(
    corpus: &Corpus,
    conditions: &[Condition],
    pretrained: &SurrogateModel,
    cfg: &ExperimentConfig,
) -> Result<Vec<ExperimentReport>> {
    let train = corpus.train_clips();
    let test = corpus.test_clips();
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput("corpus must have both splits".into()));
    }
    let mut reports = Vec::with_capacity(conditions.len());
    for &condition in conditions {
        let t0 = Instant::now();
        let prepared = prepare_condition(&train, condition, pretrained, cfg)?;
        let protect_s = t0.elapsed().as_secs_f64();
        let (snr, stoi) = if condition == Condition::Clean {
            (None, None)
        } else {
            protection_stats(&train, &prepared)
        };

        let t1 = Instant::now();
        let (tuned, losses) = fine_tune(pretrained, &prepared, cfg.train_steps, cfg.lr)?;
        let train_s = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let rows = evaluate_synthesis(&tuned, &test)?;
        let evaluate_s = t2.elapsed().as_secs_f64();

        let aggregates = aggregate_rows(&rows, snr, stoi)?;
        reports.push(ExperimentReport {
            condition: condition.label().to_string(),
            rows,
            aggregates,
            final_train_loss: losses.last().copied().unwrap_or(f64::NAN),
            seed: cfg.seed,
            timing: Timing {
                protect_s,
                train_s,
                evaluate_s,
            },
        });
    }
    Ok(reports)
}

/// One robustness-suite row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub label: String,
    /// Reason the row was skipped (e.g. missing external encoder).
    pub skipped: Option<String>,
    pub rows: Vec<ClipRow>,
    pub aggregates: Option<Aggregates>,
}

fn retrain_and_eval(
    label: &str,
    train_waves: Vec<(Waveform, CondEmbedding)>,
    test: &[&Clip],
    pretrained: &SurrogateModel,
    cfg: &ExperimentConfig,
) -> Result<RobustnessRow> {
    let (tuned, _) = fine_tune(pretrained, &train_waves, cfg.train_steps, cfg.lr)?;
    let rows = evaluate_synthesis(&tuned, test)?;
    let aggregates = aggregate_rows(&rows, None, None)?;
    Ok(RobustnessRow {
        label: label.to_string(),
        skipped: None,
        rows,
        aggregates: Some(aggregates),
    })
}

fn mp3_roundtrip(x: &Waveform, cmd_template: &str, scratch: &Path) -> Result<Waveform> {
    std::fs::create_dir_all(scratch)?;
    let in_path = scratch.join(format!("{}.wav", x.id));
    let out_path = scratch.join(format!("{}-mp3rt.wav", x.id));
    crate::wav::save_wav(x, &in_path)?;
    let cmd = cmd_template
        .replace("{in}", &in_path.to_string_lossy())
        .replace("{out}", &out_path.to_string_lossy());
    let status = std::process::Command::new("sh").arg("-c").arg(&cmd).status()?;
    if !status.success() {
        return Err(Error::Report(format!("mp3 round-trip command failed: {cmd}")));
    }
    let (wave, _) = crate::wav::load_wav(&out_path)?;
    Ok(wave)
}

/// Runs the full robustness table: one row per augmentation plus spectral
/// gating, the optional external MP3 round trip, and the adversarial-training
/// radius sweep. Rows fail independently; a failed row is reported as
/// skipped with its reason.
pub fn run_robustness_suite(
    corpus: &Corpus,
    pretrained: &SurrogateModel,
    cfg: &ExperimentConfig,
) -> Result<Vec<RobustnessRow>> {
    let train = corpus.train_clips();
    let test = corpus.test_clips();
    let spec_cfg = ExperimentConfig {
        protect: PerturbationConfig {
            mode: ObjectiveMode::Spec,
            perception_enabled: false,
            ..cfg.protect
        },
        ..cfg.clone()
    };
    let protected = prepare_condition(&train, Condition::Spec, pretrained, &spec_cfg)?;

    let mut out = Vec::new();

    // Clean baseline and unaugmented protected baseline anchor the table.
    let clean = prepare_condition(&train, Condition::Clean, pretrained, cfg)?;
    out.push(retrain_and_eval("clean", clean, &test, pretrained, cfg)?);
    out.push(retrain_and_eval(
        "protected",
        protected.clone(),
        &test,
        pretrained,
        cfg,
    )?);

    // Augmentation rows.
    for spec in AugmentationSpec::full_suite(cfg.seed) {
        let label = spec.label();
        let augmented: Result<Vec<(Waveform, CondEmbedding)>> = protected
            .iter()
            .map(|(w, c)| Ok((augment(w, &spec)?, c.clone())))
            .collect();
        match augmented {
            Ok(waves) => out.push(retrain_and_eval(&label, waves, &test, pretrained, cfg)?),
            Err(e) => out.push(RobustnessRow {
                label,
                skipped: Some(e.to_string()),
                rows: vec![],
                aggregates: None,
            }),
        }
    }

    // Spectral gating denoise.
    {
        let gated: Result<Vec<(Waveform, CondEmbedding)>> = protected
            .iter()
            .map(|(w, c)| Ok((spectral_gate_denoise(w, -40.0)?, c.clone())))
            .collect();
        out.push(retrain_and_eval("gate", gated?, &test, pretrained, cfg)?);
    }

    // MP3 requires an external encoder; absence is non-fatal.
    match &cfg.mp3_roundtrip_cmd {
        Some(cmd) => {
            let scratch = std::env::temp_dir().join("vg_mp3_scratch");
            let processed: Result<Vec<(Waveform, CondEmbedding)>> = protected
                .iter()
                .map(|(w, c)| Ok((mp3_roundtrip(w, cmd, &scratch)?, c.clone())))
                .collect();
            match processed {
                Ok(waves) => out.push(retrain_and_eval("mp3", waves, &test, pretrained, cfg)?),
                Err(e) => out.push(RobustnessRow {
                    label: "mp3".into(),
                    skipped: Some(e.to_string()),
                    rows: vec![],
                    aggregates: None,
                }),
            }
        }
        None => out.push(RobustnessRow {
            label: "mp3".into(),
            skipped: Some("no external encoder configured".into()),
            rows: vec![],
            aggregates: None,
        }),
    }

    // Adversarial training sweep over the attacker radius: the model is
    // retrained with per-step worst-case perturbations of the protected data.
    for rho_a in default_rho_grid() {
        let label = format!("adv-rho-{:.0}", rho_a * 255.0);
        let (tuned, _) =
            adversarial_fine_tune(pretrained, &protected, cfg.train_steps, cfg.lr, rho_a)?;
        let rows = evaluate_synthesis(&tuned, &test)?;
        let aggregates = aggregate_rows(&rows, None, None)?;
        out.push(RobustnessRow {
            label,
            skipped: None,
            rows,
            aggregates: Some(aggregates),
        });
    }

    Ok(out)
}

/// Madry-style adversarial training: before every descent step the training
/// inputs are re-perturbed to maximize the current model's reconstruction
/// loss inside the `rho_a` ball (warm-started sign ascent), then the model
/// trains on the perturbed batch. This is the robust-training technique that
/// breaks plain error-minimizing protections.
pub fn adversarial_fine_tune(
    checkpoint: &SurrogateModel,
    clips: &[(Waveform, CondEmbedding)],
    steps: usize,
    lr: f64,
    rho_a: f64,
) -> Result<(SurrogateModel, Vec<f64>)> {
    if rho_a == 0.0 {
        return fine_tune(checkpoint, clips, steps, lr);
    }
    let mut model = checkpoint.clone();
    let mut deltas: Vec<Vec<f64>> = clips.iter().map(|(w, _)| vec![0.0; w.len()]).collect();
    let ascent = rho_a / 4.0;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        // Inner maximization, one warm-started signed step per clip.
        let objective = crate::objectives::ObjectiveConfig {
            mode: ObjectiveMode::Pivotal,
            components: SpecComponents::default(),
            weights: crate::objectives::LossWeights::default(),
            perception: false,
            noise: None,
        };
        let batch: Vec<(Waveform, CondEmbedding)> = clips
            .par_iter()
            .zip(deltas.par_iter_mut())
            .map(|((x, cond), delta)| {
                let perturbed = Waveform::new(
                    x.samples
                        .iter()
                        .zip(delta.iter())
                        .map(|(v, d)| (v + d).clamp(-1.0, 1.0))
                        .collect(),
                    x.sample_rate,
                    x.id.clone(),
                );
                let (_, grad, _) =
                    crate::objectives::composite_loss(x, &perturbed, &model, cond, &objective)?;
                for (d, g) in delta.iter_mut().zip(grad.iter()) {
                    *d = (*d + ascent * crate::objectives::l1_sign(*g)).clamp(-rho_a, rho_a);
                }
                let adv = Waveform::new(
                    x.samples
                        .iter()
                        .zip(delta.iter())
                        .map(|(v, d)| (v + d).clamp(-1.0, 1.0))
                        .collect(),
                    x.sample_rate,
                    x.id.clone(),
                );
                Ok((adv, cond.clone()))
            })
            .collect::<Result<_>>()?;
        losses.push(model.train_step(&batch, lr)?);
    }
    Ok((model, losses))
}

/// Mixed-corpus result: protection must not bleed into clean speakers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedCorpusReport {
    pub baseline_clean_sim: f64,
    pub mixed_clean_sim: f64,
    pub protected_speaker_sim: f64,
    /// |mixed - baseline| / baseline over the clean speakers.
    pub clean_sim_rel_change: f64,
}

/// Trains once on an all-clean corpus and once with one speaker protected;
/// compares the clean speakers' synthesis quality across the two runs.
pub fn run_mixed_corpus_experiment(
    corpus: &Corpus,
    protected_speaker: &str,
    pretrained: &SurrogateModel,
    cfg: &ExperimentConfig,
) -> Result<MixedCorpusReport> {
    let train = corpus.train_clips();
    let test = corpus.test_clips();

    let all_clean = prepare_condition(&train, Condition::Clean, pretrained, cfg)?;
    let (baseline_model, _) = fine_tune(pretrained, &all_clean, cfg.train_steps, cfg.lr)?;
    let baseline_rows = evaluate_synthesis(&baseline_model, &test)?;

    // Protect only the chosen speaker's training clips.
    let spec_cfg = PerturbationConfig {
        mode: ObjectiveMode::Spec,
        perception_enabled: false,
        seed: cfg.seed,
        ..cfg.protect
    };
    let mixed: Result<Vec<(Waveform, CondEmbedding)>> = train
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cond = cond_for(pretrained, &c.speaker);
            if c.speaker == protected_speaker {
                let clip_cfg = PerturbationConfig {
                    seed: spec_cfg.seed_for(i),
                    ..spec_cfg
                };
                let prot = generate_perturbation(&c.wave, pretrained, &cond, &clip_cfg)?;
                Ok((prot.x_prot, cond))
            } else {
                Ok((c.wave.clone(), cond))
            }
        })
        .collect();
    let (mixed_model, _) = fine_tune(pretrained, &mixed?, cfg.train_steps, cfg.lr)?;
    let mixed_rows = evaluate_synthesis(&mixed_model, &test)?;

    let mean_sim = |rows: &[ClipRow], keep: &dyn Fn(&ClipRow) -> bool| -> f64 {
        let v: Vec<f64> = rows.iter().filter(|r| keep(r)).map(|r| r.sim).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let baseline_clean = mean_sim(&baseline_rows, &|r| r.speaker != protected_speaker);
    let mixed_clean = mean_sim(&mixed_rows, &|r| r.speaker != protected_speaker);
    let protected_sim = mean_sim(&mixed_rows, &|r| r.speaker == protected_speaker);

    Ok(MixedCorpusReport {
        baseline_clean_sim: baseline_clean,
        mixed_clean_sim: mixed_clean,
        protected_speaker_sim: protected_sim,
        clean_sim_rel_change: (mixed_clean - baseline_clean).abs() / baseline_clean.abs(),
    })
}

/// One point of the perturbation-radius sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsilonRow {
    pub epsilon: f64,
    pub protected_sim: f64,
    /// clean-SIM minus protected-SIM: the protection strength.
    pub strength: f64,
}

/// Sweeps the perturbation radius and reports protection strength per value.
pub fn run_epsilon_sweep(
    corpus: &Corpus,
    pretrained: &SurrogateModel,
    cfg: &ExperimentConfig,
    epsilons: &[f64],
) -> Result<(f64, Vec<EpsilonRow>)> {
    let train = corpus.train_clips();
    let test = corpus.test_clips();
    let clean = prepare_condition(&train, Condition::Clean, pretrained, cfg)?;
    let (clean_model, _) = fine_tune(pretrained, &clean, cfg.train_steps, cfg.lr)?;
    let clean_sim = aggregate_rows(&evaluate_synthesis(&clean_model, &test)?, None, None)?.mean_sim;

    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let sweep_cfg = ExperimentConfig {
            protect: PerturbationConfig {
                epsilon: eps,
                step_size: eps / 10.0,
                mode: ObjectiveMode::Spec,
                perception_enabled: false,
                ..cfg.protect
            },
            ..cfg.clone()
        };
        let prepared = prepare_condition(&train, Condition::Spec, pretrained, &sweep_cfg)?;
        let (model, _) = fine_tune(pretrained, &prepared, cfg.train_steps, cfg.lr)?;
        let sim = aggregate_rows(&evaluate_synthesis(&model, &test)?, None, None)?.mean_sim;
        rows.push(EpsilonRow {
            epsilon: eps,
            protected_sim: sim,
            strength: clean_sim - sim,
        });
    }
    Ok((clean_sim, rows))
}

/// Component-study row: which pieces of the concealment objective ran.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentRow {
    pub label: String,
    pub mean_sim: f64,
    pub mean_mcd: f64,
}

/// Alpha-sweep row: perception weight against noise audibility and effect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub mean_snr_db: f64,
    pub mean_stoi: f64,
    pub mean_sim: f64,
}

/// Beta-sweep row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub mean_sim: f64,
    pub mean_mcd: f64,
}

/// Wall-clock of the objective comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuntimeAblation {
    pub pivotal_s_per_clip: f64,
    pub vanilla_s_per_clip: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub components: Vec<ComponentRow>,
    pub alpha_sweep: Vec<AlphaRow>,
    pub beta_sweep: Vec<BetaRow>,
    pub runtime: RuntimeAblation,
}

/// Default beta grid: fifteen values spanning [0, 100].
pub fn default_beta_grid() -> Vec<f64> {
    vec![
        0.0, 0.001, 0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 60.0, 80.0, 100.0,
    ]
}

/// Default alpha grid spanning [0.001, 1] plus the off switch.
pub fn default_alpha_grid() -> Vec<f64> {
    vec![0.0, 0.001, 0.01, 0.05, 0.2, 1.0]
}

/// Runs the component study, the alpha and beta sweeps, and the
/// pivotal-versus-vanilla runtime comparison.
pub fn run_ablations(
    corpus: &Corpus,
    pretrained: &SurrogateModel,
    cfg: &ExperimentConfig,
    alphas: &[f64],
    betas: &[f64],
) -> Result<AblationReport> {
    let train = corpus.train_clips();
    let test = corpus.test_clips();

    // Component study: pivotal alone, plus each concealment piece.
    let combos: [(&str, ObjectiveMode, SpecComponents); 4] = [
        ("mel", ObjectiveMode::Pivotal, SpecComponents { kl: false, l1: false }),
        ("mel+kl", ObjectiveMode::Spec, SpecComponents { kl: true, l1: false }),
        ("mel+l1", ObjectiveMode::Spec, SpecComponents { kl: false, l1: true }),
        ("mel+kl+l1", ObjectiveMode::Spec, SpecComponents { kl: true, l1: true }),
    ];
    let mut components = Vec::with_capacity(combos.len());
    for (label, mode, comps) in combos {
        let run_cfg = ExperimentConfig {
            protect: PerturbationConfig {
                mode,
                components: comps,
                perception_enabled: false,
                ..cfg.protect
            },
            ..cfg.clone()
        };
        let prepared = prepare_condition(&train, Condition::Spec, pretrained, &run_cfg)?;
        let (model, _) = fine_tune(pretrained, &prepared, cfg.train_steps, cfg.lr)?;
        let agg = aggregate_rows(&evaluate_synthesis(&model, &test)?, None, None)?;
        components.push(ComponentRow {
            label: label.to_string(),
            mean_sim: agg.mean_sim,
            mean_mcd: agg.mean_mcd,
        });
    }

    // Alpha sweep: same clips and seeds, varying only the perception weight.
    let mut alpha_sweep = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let run_cfg = ExperimentConfig {
            protect: PerturbationConfig {
                mode: ObjectiveMode::Spec,
                perception_enabled: true,
                weights: crate::objectives::LossWeights {
                    alpha,
                    ..cfg.protect.weights
                },
                ..cfg.protect
            },
            ..cfg.clone()
        };
        let prepared = prepare_condition(&train, Condition::SpecPerception, pretrained, &run_cfg)?;
        let (snr, stoi) = protection_stats(&train, &prepared);
        let (model, _) = fine_tune(pretrained, &prepared, cfg.train_steps, cfg.lr)?;
        let agg = aggregate_rows(&evaluate_synthesis(&model, &test)?, snr, stoi)?;
        alpha_sweep.push(AlphaRow {
            alpha,
            mean_snr_db: agg.mean_snr_db.unwrap_or(f64::INFINITY),
            mean_stoi: agg.mean_stoi.unwrap_or(1.0),
            mean_sim: agg.mean_sim,
        });
    }

    // Beta sweep.
    let mut beta_sweep = Vec::with_capacity(betas.len());
    for &beta in betas {
        let run_cfg = ExperimentConfig {
            protect: PerturbationConfig {
                mode: ObjectiveMode::Spec,
                perception_enabled: false,
                weights: crate::objectives::LossWeights {
                    beta,
                    ..cfg.protect.weights
                },
                ..cfg.protect
            },
            ..cfg.clone()
        };
        let prepared = prepare_condition(&train, Condition::Spec, pretrained, &run_cfg)?;
        let (model, _) = fine_tune(pretrained, &prepared, cfg.train_steps, cfg.lr)?;
        let agg = aggregate_rows(&evaluate_synthesis(&model, &test)?, None, None)?;
        beta_sweep.push(BetaRow {
            beta,
            mean_sim: agg.mean_sim,
            mean_mcd: agg.mean_mcd,
        });
    }

    // Runtime: pivotal versus the multi-objective vanilla baseline on the
    // same clips, perception off on both sides.
    let runtime_clips: Vec<&Clip> = train.iter().take(4).copied().collect();
    let time_mode = |mode: ObjectiveMode| -> Result<f64> {
        let run_cfg = PerturbationConfig {
            mode,
            perception_enabled: false,
            seed: cfg.seed,
            ..cfg.protect
        };
        let t0 = Instant::now();
        for (i, clip) in runtime_clips.iter().enumerate() {
            let clip_cfg = PerturbationConfig {
                seed: run_cfg.seed_for(i),
                ..run_cfg
            };
            generate_perturbation(
                &clip.wave,
                pretrained,
                &cond_for(pretrained, &clip.speaker),
                &clip_cfg,
            )?;
        }
        Ok(t0.elapsed().as_secs_f64() / runtime_clips.len() as f64)
    };
    let runtime = RuntimeAblation {
        pivotal_s_per_clip: time_mode(ObjectiveMode::Pivotal)?,
        vanilla_s_per_clip: time_mode(ObjectiveMode::Vanilla)?,
    };

    Ok(AblationReport {
        components,
        alpha_sweep,
        beta_sweep,
        runtime,
    })
}

/// The file a full run leaves behind: config snapshot, seeds, and whatever
/// sections were produced.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportBundle {
    pub title: String,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unlearnability: Vec<ExperimentReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub robustness: Vec<RobustnessRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixed_corpus: Option<MixedCorpusReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilon_sweep: Vec<EpsilonRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablations: Option<AblationReport>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Renders the human-readable aligned table for a bundle.
pub fn render_table(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    let push_line = |out: &mut String, s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    push_line(&mut out, format!("== {} (seed {}) ==", bundle.title, bundle.seed));
    if !bundle.unlearnability.is_empty() {
        push_line(&mut out, String::new());
        push_line(
            &mut out,
            format!(
                "{:<18} {:>8} {:>8} {:>8} {:>10} {:>8}",
                "condition", "SIM", "MCD", "ASR%", "SNR dB", "STOI"
            ),
        );
        for r in &bundle.unlearnability {
            push_line(
                &mut out,
                format!(
                    "{:<18} {:>8.3} {:>8.3} {:>8.1} {:>10} {:>8}",
                    r.condition,
                    r.aggregates.mean_sim,
                    r.aggregates.mean_mcd,
                    r.aggregates.asr_pct,
                    r.aggregates
                        .mean_snr_db
                        .map_or("-".to_string(), |v| format!("{v:.2}")),
                    r.aggregates
                        .mean_stoi
                        .map_or("-".to_string(), |v| format!("{v:.3}")),
                ),
            );
        }
    }
    if !bundle.robustness.is_empty() {
        push_line(&mut out, String::new());
        push_line(
            &mut out,
            format!("{:<18} {:>8} {:>8} {:>8}  note", "technique", "SIM", "MCD", "ASR%"),
        );
        for r in &bundle.robustness {
            match (&r.aggregates, &r.skipped) {
                (Some(a), _) => push_line(
                    &mut out,
                    format!(
                        "{:<18} {:>8.3} {:>8.3} {:>8.1}",
                        r.label, a.mean_sim, a.mean_mcd, a.asr_pct
                    ),
                ),
                (None, Some(reason)) => push_line(
                    &mut out,
                    format!("{:<18} {:>8} {:>8} {:>8}  skipped: {}", r.label, "-", "-", "-", reason),
                ),
                (None, None) => {}
            }
        }
    }
    if let Some(m) = &bundle.mixed_corpus {
        push_line(&mut out, String::new());
        push_line(
            &mut out,
            format!(
                "mixed corpus: clean sim {:.3} -> {:.3} (rel change {:.1}%), protected speaker sim {:.3}",
                m.baseline_clean_sim,
                m.mixed_clean_sim,
                100.0 * m.clean_sim_rel_change,
                m.protected_speaker_sim
            ),
        );
    }
    if !bundle.epsilon_sweep.is_empty() {
        push_line(&mut out, String::new());
        push_line(&mut out, format!("{:>10} {:>10} {:>10}", "epsilon", "SIM", "strength"));
        for r in &bundle.epsilon_sweep {
            push_line(
                &mut out,
                format!("{:>10.5} {:>10.3} {:>10.3}", r.epsilon, r.protected_sim, r.strength),
            );
        }
    }
    if let Some(a) = &bundle.ablations {
        push_line(&mut out, String::new());
        for c in &a.components {
            push_line(
                &mut out,
                format!("component {:<12} SIM {:>7.3}  MCD {:>7.3}", c.label, c.mean_sim, c.mean_mcd),
            );
        }
        for r in &a.alpha_sweep {
            push_line(
                &mut out,
                format!(
                    "alpha {:>6.3}  SNR {:>7.3}  STOI {:>6.3}  SIM {:>6.3}",
                    r.alpha, r.mean_snr_db, r.mean_stoi, r.mean_sim
                ),
            );
        }
        for r in &a.beta_sweep {
            push_line(
                &mut out,
                format!("beta {:>7.3}  SIM {:>6.3}  MCD {:>7.3}", r.beta, r.mean_sim, r.mean_mcd),
            );
        }
        push_line(
            &mut out,
            format!(
                "runtime per clip: pivotal {:.3} s, vanilla {:.3} s",
                a.runtime.pivotal_s_per_clip, a.runtime.vanilla_s_per_clip
            ),
        );
    }
    out
}

/// Writes `<stem>.json` and `<stem>.txt` atomically; returns the two paths.
pub fn emit_report(bundle: &ReportBundle, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    for r in &bundle.unlearnability {
        r.verify()?;
    }
    let json_path = dir.join(format!("{stem}.json"));
    let txt_path = dir.join(format!("{stem}.txt"));
    write_atomic(&json_path, serde_json::to_string_pretty(bundle)?.as_bytes())?;
    write_atomic(&txt_path, render_table(bundle).as_bytes())?;
    Ok((json_path, txt_path))
}

/// Reads a bundle back; the artifact's own reader for round trips.
pub fn load_report(path: &Path) -> Result<ReportBundle> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
