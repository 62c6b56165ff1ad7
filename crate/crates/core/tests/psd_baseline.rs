//! PSD-feature MLP on the default synthetic corpus.

use advcensor::experiment::{prepare, run_data, run_one, ExperimentConfig, Mode};

#[test]
fn censoring_reaches_chance_without_losing_emotion() {
    let mut cfg = ExperimentConfig {
        mode: Mode::PsdMlp,
        ..ExperimentConfig::default()
    };
    cfg.trainer.learning_rate = 5e-2;
    let prepared = prepare(&cfg).unwrap();
    let rd = run_data::<f32>(&prepared.windows, &cfg, 0).unwrap();
    let (plain, _, _) = run_one(&cfg, &rd, 0.0, 0).unwrap();
    let (censored, _, _) = run_one(&cfg, &rd, 0.1, 0).unwrap();
    println!(
        "λ=0: emotion {:.3}, adversary {:.3}; λ=0.1: emotion {:.3}, adversary {:.3}",
        plain.val_emotion_acc, plain.val_adversary_acc, censored.val_emotion_acc, censored.val_adversary_acc
    );
    assert!(plain.val_emotion_acc >= 1.0 / 3.0 + 0.15);
    assert!((censored.val_adversary_acc - 0.25).abs() <= 0.07);
}
