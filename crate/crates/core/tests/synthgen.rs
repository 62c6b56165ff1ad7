//! Properties of the default synthetic corpus after preprocessing.

use advcensor::data::{EmotionState, WindowSample, COMMON_CHANNELS, WINDOW_CHANNELS, WINDOW_SAMPLES};
use advcensor::experiment::{prepare, ExperimentConfig};
use advcensor::psd::{band_power, feature_matrix, welch, BandDef};
use advcensor::synth::default_class_bands;
use advcensor::trainer::GaussianNb;
use ndarray::Axis;

const RATE: f64 = 128.0;

fn windows() -> Vec<WindowSample> {
    prepare(&ExperimentConfig::default()).unwrap().windows
}

#[test]
fn source_is_decodable_from_band_power() {
    let windows = windows();
    let fm = feature_matrix(&windows, &COMMON_CHANNELS, RATE).unwrap();
    let logp = fm.values.mapv(|v| (v as f64).max(1e-12).ln());
    // Hold out whole trials so the probe cannot memorize a trial.
    let (test, train): (Vec<usize>, Vec<usize>) = (0..windows.len()).partition(|&i| windows[i].trial_uid % 3 == 0);
    let d: Vec<usize> = windows.iter().map(|w| w.source_id).collect();
    let pick = |idx: &[usize]| logp.select(Axis(0), idx);
    let nb = GaussianNb::fit(pick(&train).view(), &train.iter().map(|&i| d[i]).collect::<Vec<_>>()).unwrap();
    let pred = nb.predict(pick(&test).view());
    let acc = test.iter().zip(&pred).filter(|(&i, &p)| d[i] == p).count() as f64 / test.len() as f64;
    println!(
        "source accuracy from log band power: {acc:.3} on {} windows",
        test.len()
    );
    assert!(acc > 0.60, "{acc}");
}

#[test]
fn planted_class_band_dominates() {
    let bands = default_class_bands();
    let narrow = |f: f64| BandDef {
        name: String::new(),
        lo_hz: f - 1.5,
        hi_hz: Some(f + 1.5),
    };
    let windows = windows();
    let mut hits = 0;
    for w in &windows {
        let power = |state: EmotionState| {
            let band = narrow(bands[&state]);
            w.data
                .outer_iter()
                .map(|ch| {
                    let x: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
                    band_power(&welch(&x, RATE).unwrap(), RATE, &band)
                })
                .sum::<f64>()
        };
        let own = power(w.label);
        if EmotionState::ALL
            .iter()
            .filter(|&&s| s != w.label)
            .all(|&s| power(s) < own)
        {
            hits += 1;
        }
    }
    let frac = hits as f64 / windows.len() as f64;
    println!("planted band wins in {frac:.3} of {} windows", windows.len());
    assert!(frac >= 0.90, "{frac}");
}

#[test]
fn windows_are_finite_and_shaped() {
    let windows = windows();
    assert!(!windows.is_empty());
    assert!(windows
        .iter()
        .all(|w| w.data.dim() == (WINDOW_CHANNELS, WINDOW_SAMPLES) && w.data.iter().all(|v| v.is_finite())));
}
