//! Command-line surface for the voice-protection toolkit.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{resolve, EpsilonArg, FileConfig};
use voiceguard::adversary::{augment, spectral_gate_denoise, AugmentationSpec};
use voiceguard::dsp::Waveform;
use voiceguard::metrics::{
    mcd_dtw, snr_db, speaker_sim, stoi_score, wer_via_asr, AsrClientConfig, MetricReport,
    WerOutcome,
};
use voiceguard::objectives::{LossWeights, ObjectiveMode, SpecComponents};
use voiceguard::pipeline::{
    default_alpha_grid, default_beta_grid, emit_report, load_report, pretrain_surrogate,
    render_table, run_ablations, run_unlearnability_experiment, run_robustness_suite, Condition,
    Corpus, ExperimentConfig, ReportBundle,
};
use voiceguard::protector::{generate_perturbation, PerturbationConfig, UpdateRule};
use voiceguard::surrogate::{CondEmbedding, SurrogateModel};
use voiceguard::wav::{load_wav, save_wav};

#[derive(Parser)]
#[command(
    name = "voiceguard",
    about = "Embed bounded error-minimizing perturbations into speech so synthesizers trained on it clone badly",
    version
)]
struct Cli {
    /// Config file of `key = value` lines (flags win over file values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Protect one WAV file by embedding a perturbation.
    Protect(ProtectArgs),
    /// Score a degraded/synthesized WAV against a reference.
    Evaluate(EvaluateArgs),
    /// Apply the adversary toolbox to protected audio.
    Attack(AttackArgs),
    /// Run the component/weight/runtime ablations on a generated corpus.
    Ablate(AblateArgs),
    /// Run the clean-versus-protected training demonstration end to end.
    TrainDemo(TrainDemoArgs),
    /// Re-read a report, verify its aggregates, and print the table.
    Report(ReportArgs),
}

#[derive(Args)]
struct ProtectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Perturbation radius, fraction ("8/255") or decimal.
    #[arg(long)]
    epsilon: Option<EpsilonArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    max_epoch: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// pivotal | spec | vanilla
    #[arg(long)]
    mode: Option<String>,
    /// Disable the perception (STOI + STFT) term.
    #[arg(long)]
    no_perception: bool,
    /// Use the literal bang-bang sign update instead of projected steps.
    #[arg(long)]
    literal_update: bool,
    /// Pre-trained surrogate model file; a disposable surrogate is trained
    /// on the input clip when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Speaker id for the conditioning embedding.
    #[arg(long, default_value = "speaker")]
    speaker: String,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference (original) WAV.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypothesis (degraded, protected, or synthesized) WAV.
    #[arg(long = "hyp")]
    hypothesis: PathBuf,
    /// Reference transcript for WER via the external ASR service.
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    asr_endpoint: Option<String>,
    #[arg(long)]
    asr_timeout_ms: Option<u64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Protected WAV file or directory of WAV files.
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory for the attacked audio.
    #[arg(long = "out")]
    output: PathBuf,
    /// waveguard | transform | full
    #[arg(long, default_value = "full")]
    suite: String,
    /// Also run the spectral-gating denoiser row.
    #[arg(long)]
    denoise: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    clips_per_speaker: Option<usize>,
    #[arg(long)]
    max_epoch: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
}

#[derive(Args)]
struct TrainDemoArgs {
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    clips_per_speaker: Option<usize>,
    #[arg(long)]
    max_epoch: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    /// Comma list: clean,random_noise,pivotal,spec,spec+perception or "all".
    #[arg(long, default_value = "all")]
    conditions: String,
    /// Also run the robustness suite (slow).
    #[arg(long)]
    robustness: bool,
    /// External MP3 round-trip command with {in}/{out} placeholders.
    #[arg(long)]
    mp3_cmd: Option<String>,
    /// Write the generated corpus as WAV files next to the reports.
    #[arg(long)]
    materialize: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            // One machine-parsable line on stderr.
            eprintln!("error: {}", format!("{e:#}").replace('\n', " | "));
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Protect(args) => protect(args, &file_cfg),
        Command::Evaluate(args) => evaluate(args, &file_cfg),
        Command::Attack(args) => attack(args, &file_cfg),
        Command::Ablate(args) => ablate(args, &file_cfg),
        Command::TrainDemo(args) => train_demo(args, &file_cfg),
        Command::Report(args) => report(args),
    }
}

fn parse_mode(s: &str) -> Result<ObjectiveMode> {
    match s {
        "pivotal" => Ok(ObjectiveMode::Pivotal),
        "spec" => Ok(ObjectiveMode::Spec),
        "vanilla" => Ok(ObjectiveMode::Vanilla),
        other => bail!("unknown mode '{other}' (expected pivotal | spec | vanilla)"),
    }
}

fn ensure_distinct(input: &Path, output: &Path) -> Result<()> {
    if input == output {
        bail!("refusing to overwrite the input: --out must differ from --in");
    }
    Ok(())
}

fn protect(args: ProtectArgs, file_cfg: &FileConfig) -> Result<()> {
    ensure_distinct(&args.input, &args.output)?;
    let epsilon = resolve(
        "epsilon",
        args.epsilon,
        file_cfg,
        "8/255".parse::<EpsilonArg>().expect("default epsilon"),
    )?;
    let alpha = resolve("alpha", args.alpha, file_cfg, 0.05)?;
    let beta = resolve("beta", args.beta, file_cfg, 10.0)?;
    let max_epoch = resolve("max_epoch", args.max_epoch, file_cfg, 100)?;
    let step_size = resolve("step_size", args.step_size, file_cfg, epsilon.value / 10.0)?;
    let seed = resolve("seed", args.seed, file_cfg, 0u64)?;
    let mode_name = resolve("mode", args.mode, file_cfg, "spec".to_string())?;
    let mode = parse_mode(&mode_name)?;

    let cfg = PerturbationConfig {
        epsilon: epsilon.value,
        max_epoch,
        weights: LossWeights { alpha, beta },
        perception_enabled: !args.no_perception,
        step_size,
        seed,
        mode,
        components: SpecComponents::default(),
        update_rule: if args.literal_update {
            UpdateRule::LiteralSign
        } else {
            UpdateRule::ProjectedStep
        },
    };

    let (wave, record) = load_wav(&args.input)?;
    eprintln!(
        "loaded {} ({:.2} s at {} Hz, resampled to 16 kHz)",
        record.path, record.duration_s, record.sample_rate
    );
    let model = match &args.model {
        Some(path) => SurrogateModel::load(path)?,
        None => {
            eprintln!("no --model given; pre-training a disposable surrogate on the input clip");
            let mut m = SurrogateModel::init(seed);
            let cond = CondEmbedding::from_speaker(&args.speaker, m.cond_dim);
            let batch = vec![(wave.clone(), cond)];
            for _ in 0..200 {
                m.train_step(&batch, voiceguard::pipeline::DEFAULT_LR)?;
            }
            m
        }
    };
    let cond = CondEmbedding::from_speaker(&args.speaker, model.cond_dim);
    let protected = generate_perturbation(&wave, &model, &cond, &cfg)?;
    save_wav(&protected.x_prot, &args.output)?;

    let snr = snr_db(&wave, &protected.delta)?;
    let stoi = stoi_score(&wave, &protected.x_prot).ok();
    let max_delta = protected.delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    println!(
        "{}",
        serde_json::json!({
            "input": args.input,
            "output": args.output,
            "epsilon": epsilon.text,
            "mode": mode_name,
            "seed": seed,
            "noise_seed": protected.noise_seed,
            "max_abs_delta": max_delta,
            "snr_db": snr.db,
            "stoi": stoi,
            "first_loss": protected.loss_trace.first(),
            "final_loss": protected.loss_trace.last(),
        })
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs, file_cfg: &FileConfig) -> Result<()> {
    let (reference, _) = load_wav(&args.reference)?;
    let (hypothesis, _) = load_wav(&args.hypothesis)?;

    let mcd = mcd_dtw(
        &voiceguard::dsp::mfcc(&reference)?,
        &voiceguard::dsp::mfcc(&hypothesis)?,
    )?;
    let sim = speaker_sim(&reference, &hypothesis)?;
    let stoi = if reference.len() == hypothesis.len() {
        stoi_score(&reference, &hypothesis)?
    } else {
        f64::NAN
    };
    let snr = if reference.len() == hypothesis.len() {
        let delta: Vec<f64> = hypothesis
            .samples
            .iter()
            .zip(reference.samples.iter())
            .map(|(h, r)| h - r)
            .collect();
        snr_db(&reference, &delta).map(|s| s.db).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };

    let endpoint = args
        .asr_endpoint
        .or_else(|| file_cfg.get("asr_endpoint").map(String::from));
    let timeout = resolve("asr_timeout_ms", args.asr_timeout_ms, file_cfg, 10_000u64)?;
    let wer = match (&endpoint, &args.text) {
        (Some(url), Some(text)) => {
            match wer_via_asr(&hypothesis, text, &AsrClientConfig::new(url.clone(), timeout)) {
                WerOutcome::Measured { wer_pct, .. } => Some(wer_pct),
                WerOutcome::Unavailable { reason } => {
                    eprintln!("wer unavailable: {reason}");
                    None
                }
            }
        }
        _ => None,
    };

    let report = MetricReport::new(mcd, snr, sim, stoi, wer);
    let json = serde_json::to_string_pretty(&report)?;
    match &args.output {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn suite_for(name: &str, seed: u64) -> Result<Vec<AugmentationSpec>> {
    match name {
        "waveguard" => Ok(AugmentationSpec::defense_suite()),
        "transform" => Ok(AugmentationSpec::transform_suite(seed)),
        "full" => Ok(AugmentationSpec::full_suite(seed)),
        other => bail!("unknown suite '{other}' (expected waveguard | transform | full)"),
    }
}

fn attack(args: AttackArgs, file_cfg: &FileConfig) -> Result<()> {
    ensure_distinct(&args.input, &args.output)?;
    let seed = resolve("seed", args.seed, file_cfg, 0u64)?;
    let suite = suite_for(&args.suite, seed)?;
    std::fs::create_dir_all(&args.output)?;

    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&args.input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
            .collect();
        v.sort();
        v
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        bail!("no .wav files under {}", args.input.display());
    }

    let mut rows = Vec::new();
    for path in &inputs {
        let (wave, _) = load_wav(path)?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let mut techniques: Vec<(String, Waveform)> = Vec::new();
        for spec in &suite {
            techniques.push((spec.label(), augment(&wave, spec)?));
        }
        if args.denoise {
            techniques.push(("gate".into(), spectral_gate_denoise(&wave, -40.0)?));
        }
        for (label, out_wave) in techniques {
            let out_path = args.output.join(format!("{stem}-{label}.wav"));
            save_wav(&out_wave, &out_path)?;
            let stoi = if out_wave.len() == wave.len() {
                stoi_score(&wave, &out_wave).ok()
            } else {
                None
            };
            rows.push(serde_json::json!({
                "input": path,
                "technique": label,
                "output": out_path,
                "stoi_vs_input": stoi,
                "len": out_wave.len(),
            }));
        }
    }
    let body = serde_json::to_string_pretty(&serde_json::json!({
        "seed": seed,
        "suite": args.suite,
        "rows": rows,
    }))?;
    match &args.report {
        Some(path) => std::fs::write(path, &body)?,
        None => println!("{body}"),
    }
    Ok(())
}

fn demo_corpora(
    seed: u64,
    speakers: usize,
    clips_per_speaker: usize,
) -> (Corpus, Corpus) {
    let victims = Corpus::generate(seed, "spk", speakers, clips_per_speaker, 16_000);
    let background = Corpus::generate(seed ^ 0xB16B00B5, "bg", speakers, clips_per_speaker, 16_000);
    (victims, background)
}

fn train_demo(args: TrainDemoArgs, file_cfg: &FileConfig) -> Result<()> {
    let seed = resolve("seed", args.seed, file_cfg, 0u64)?;
    let speakers = resolve("speakers", args.speakers, file_cfg, 8usize)?;
    let clips = resolve("clips_per_speaker", args.clips_per_speaker, file_cfg, 4usize)?;
    let max_epoch = resolve("max_epoch", args.max_epoch, file_cfg, 100usize)?;
    let train_steps = resolve("train_steps", args.train_steps, file_cfg, 150usize)?;
    let mp3_cmd = args
        .mp3_cmd
        .or_else(|| file_cfg.get("mp3_cmd").map(String::from));

    let conditions: Vec<Condition> = if args.conditions == "all" {
        Condition::all()
    } else {
        args.conditions
            .split(',')
            .map(|c| match c.trim() {
                "clean" => Ok(Condition::Clean),
                "random_noise" => Ok(Condition::RandomNoise),
                "pivotal" => Ok(Condition::Pivotal),
                "spec" => Ok(Condition::Spec),
                "spec+perception" => Ok(Condition::SpecPerception),
                other => bail!("unknown condition '{other}'"),
            })
            .collect::<Result<_>>()?
    };

    let (victims, background) = demo_corpora(seed, speakers, clips);
    if args.materialize {
        victims.materialize(&args.out_dir.join("corpus"))?;
    }
    eprintln!("pre-training surrogate on the background corpus");
    let (model, _) = pretrain_surrogate(&background, 200, voiceguard::pipeline::DEFAULT_LR, seed)?;

    let cfg = ExperimentConfig {
        seed,
        protect: PerturbationConfig {
            max_epoch,
            seed,
            ..PerturbationConfig::default()
        },
        train_steps,
        mp3_roundtrip_cmd: mp3_cmd,
        ..ExperimentConfig::default()
    };
    eprintln!("running conditions: {:?}", conditions.iter().map(|c| c.label()).collect::<Vec<_>>());
    let unlearnability = run_unlearnability_experiment(&victims, &conditions, &model, &cfg)?;
    let robustness = if args.robustness {
        eprintln!("running the robustness suite");
        run_robustness_suite(&victims, &model, &cfg)?
    } else {
        vec![]
    };

    let bundle = ReportBundle {
        title: "training demonstration".into(),
        seed,
        config: serde_json::to_value(&cfg)?,
        unlearnability,
        robustness,
        ..ReportBundle::default()
    };
    let (json_path, txt_path) = emit_report(&bundle, &args.out_dir, "train-demo")?;
    print!("{}", render_table(&bundle));
    eprintln!("wrote {} and {}", json_path.display(), txt_path.display());
    Ok(())
}

fn ablate(args: AblateArgs, file_cfg: &FileConfig) -> Result<()> {
    let seed = resolve("seed", args.seed, file_cfg, 0u64)?;
    let speakers = resolve("speakers", args.speakers, file_cfg, 4usize)?;
    let clips = resolve("clips_per_speaker", args.clips_per_speaker, file_cfg, 4usize)?;
    let max_epoch = resolve("max_epoch", args.max_epoch, file_cfg, 60usize)?;
    let train_steps = resolve("train_steps", args.train_steps, file_cfg, 120usize)?;

    let (victims, background) = demo_corpora(seed, speakers, clips);
    eprintln!("pre-training surrogate on the background corpus");
    let (model, _) = pretrain_surrogate(&background, 200, voiceguard::pipeline::DEFAULT_LR, seed)?;
    let cfg = ExperimentConfig {
        seed,
        protect: PerturbationConfig {
            max_epoch,
            seed,
            ..PerturbationConfig::default()
        },
        train_steps,
        ..ExperimentConfig::default()
    };
    let ablations = run_ablations(
        &victims,
        &model,
        &cfg,
        &default_alpha_grid(),
        &default_beta_grid(),
    )?;
    let bundle = ReportBundle {
        title: "ablations".into(),
        seed,
        config: serde_json::to_value(&cfg)?,
        ablations: Some(ablations),
        ..ReportBundle::default()
    };
    let (json_path, txt_path) = emit_report(&bundle, &args.out_dir, "ablate")?;
    print!("{}", render_table(&bundle));
    eprintln!("wrote {} and {}", json_path.display(), txt_path.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let bundle = load_report(&args.input)
        .with_context(|| format!("reading report {}", args.input.display()))?;
    for r in &bundle.unlearnability {
        r.verify()
            .with_context(|| format!("aggregate check failed for condition {}", r.condition))?;
    }
    print!("{}", render_table(&bundle));
    Ok(())
}
