//! Quick probes of pipeline behavior.
//! cargo test -p voiceguard --test probe -- --ignored --nocapture

use voiceguard::objectives::{ObjectiveMode, SpecComponents};
use voiceguard::pipeline::{
    aggregate_rows, evaluate_synthesis, fine_tune, prepare_condition, pretrain_surrogate,
    Condition, Corpus, ExperimentConfig,
};
use voiceguard::protector::PerturbationConfig;

#[test]
#[ignore]
fn probe_components_full_scale() {
    let victims = Corpus::generate(11, "spk", 8, 4, 16_000);
    let background = Corpus::generate(77, "bg", 8, 4, 16_000);
    let (model, _) = pretrain_surrogate(&background, 300, 2.0, 11).unwrap();
    let cfg = ExperimentConfig {
        seed: 11,
        lr: 2.0,
        train_steps: 300,
        ..ExperimentConfig::default()
    };
    let train = victims.train_clips();
    let test = victims.test_clips();

    let combos: [(&str, ObjectiveMode, SpecComponents); 4] = [
        ("mel", ObjectiveMode::Pivotal, SpecComponents { kl: false, l1: false }),
        ("mel+kl", ObjectiveMode::Spec, SpecComponents { kl: true, l1: false }),
        ("mel+l1", ObjectiveMode::Spec, SpecComponents { kl: false, l1: true }),
        ("mel+kl+l1", ObjectiveMode::Spec, SpecComponents { kl: true, l1: true }),
    ];
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
        let prepared = prepare_condition(&train, Condition::Spec, &model, &run_cfg).unwrap();
        let (tuned, _) = fine_tune(&model, &prepared, cfg.train_steps, cfg.lr).unwrap();
        let agg = aggregate_rows(&evaluate_synthesis(&tuned, &test).unwrap(), None, None).unwrap();
        println!("{label:<10} SIM {:.3} MCD {:.3}", agg.mean_sim, agg.mean_mcd);
    }
}
