//! Deterministic synthetic multi-source corpus.
//!
//! Each trial carries a class oscillation whose frequency depends only on the
//! emotion state, plus per-source nuisances: a fixed channel-gain vector, a
//! narrowband interference tone at a source-specific frequency, and AR(1)
//! noise coloration. Nuisance amplitudes scale with `nuisance_strength`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EmotionState, LabelScheme, RawLabel, SourceManifest, Trial, COMMON_CHANNELS};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, derived_rng};

/// 10-20 names of a 62-electrode cap; source channel sets are drawn from it.
pub const EXTENDED_CHANNELS: [&str; 62] = [
    "FP1", "FPZ", "FP2", "AF3", "AF4", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8", "FT7", "FC5", "FC3",
    "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "T7", "C5", "C3", "C1", "CZ", "C2", "C4", "C6", "T8", "TP7", "CP5",
    "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "P7", "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8", "PO7",
    "PO5", "PO3", "POZ", "PO4", "PO6", "PO8", "CB1", "O1", "OZ", "O2", "CB2",
];

/// Interference tone per source index. Inside the 4–45 Hz passband and at
/// least 5 Hz from every default class band, so a tone never leaks into a
/// class band.
pub const TONE_HZ: [f64; 7] = [15.0, 25.0, 35.0, 42.0, 29.0, 32.0, 39.0];

const COLORATION: [f64; 4] = [0.0, 0.35, -0.35, 0.7];
const GAIN_SPREAD: f64 = 0.4;
const FREQ_JITTER_HZ: f64 = 0.5;
const RATING_SIGMA: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_sources: usize,
    pub subjects_per_source: usize,
    pub trials_per_subject: usize,
    pub trial_seconds: f64,
    pub sampling_rate_hz: Vec<f64>,
    pub channel_count: Vec<usize>,
    /// Oscillation frequency per harmonized state.
    pub class_band_hz: BTreeMap<EmotionState, f64>,
    pub class_amplitude: f64,
    pub tone_amplitude: f64,
    pub nuisance_strength: f64,
    pub noise_std: f64,
    /// Per-trial DC offsets are drawn uniformly from `±dc_offset`.
    pub dc_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sources: 4,
            subjects_per_source: 3,
            trials_per_subject: 12,
            trial_seconds: 24.0,
            sampling_rate_hz: vec![200.0, 200.0, 128.0, 128.0],
            channel_count: vec![62, 62, 32, 14],
            class_band_hz: default_class_bands(),
            class_amplitude: 2.0,
            tone_amplitude: 4.0,
            nuisance_strength: 1.0,
            noise_std: 1.0,
            dc_offset: 10.0,
            seed: 0,
        }
    }
}

pub fn default_class_bands() -> BTreeMap<EmotionState, f64> {
    BTreeMap::from([
        (EmotionState::Negative, 6.0),
        (EmotionState::Neutral, 10.0),
        (EmotionState::Positive, 20.0),
    ])
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.n_sources == 0 || self.n_sources > TONE_HZ.len() {
            return fail(format!("n_sources must be in 1..={}", TONE_HZ.len()));
        }
        if self.sampling_rate_hz.len() != self.n_sources || self.channel_count.len() != self.n_sources {
            return fail("sampling_rate_hz and channel_count need one entry per source".into());
        }
        if self.subjects_per_source == 0 || self.trials_per_subject == 0 {
            return fail("subjects_per_source and trials_per_subject must be >= 1".into());
        }
        if !(self.trial_seconds > 0.0) {
            return fail("trial_seconds must be > 0".into());
        }
        for (&rate, &count) in self.sampling_rate_hz.iter().zip(&self.channel_count) {
            if !(rate >= 100.0) {
                return fail(format!("sampling rate {rate} Hz cannot carry the 4-45 Hz band"));
            }
            if count < COMMON_CHANNELS.len() || count > EXTENDED_CHANNELS.len() {
                return fail(format!(
                    "channel_count {count} must lie in {}..={}",
                    COMMON_CHANNELS.len(),
                    EXTENDED_CHANNELS.len()
                ));
            }
        }
        for state in EmotionState::ALL {
            match self.class_band_hz.get(&state) {
                Some(&f) if (4.0 + FREQ_JITTER_HZ..=45.0 - FREQ_JITTER_HZ).contains(&f) => {}
                Some(&f) => return fail(format!("class band {f} Hz for {state:?} is outside 4-45 Hz")),
                None => return fail(format!("no class band for {state:?}")),
            }
        }
        if !(self.nuisance_strength >= 0.0) {
            return fail("nuisance_strength must be >= 0".into());
        }
        if !(self.noise_std > 0.0) {
            return fail("noise_std must be > 0".into());
        }
        if !(self.class_amplitude >= 0.0 && self.tone_amplitude >= 0.0 && self.dc_offset >= 0.0) {
            return fail("amplitudes must be >= 0".into());
        }
        Ok(())
    }
}

/// Generated corpus. `trials[i].source_id` indexes `manifests`;
/// `states[i]` is the planted harmonized state of `trials[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub manifests: Vec<SourceManifest>,
    pub trials: Vec<Trial>,
    pub states: Vec<EmotionState>,
}

impl SynthCorpus {
    pub fn pairs(&self) -> impl Iterator<Item = (&Trial, &SourceManifest)> {
        self.trials.iter().map(move |t| (t, &self.manifests[t.source_id]))
    }
}

/// Channel set for a source with `count` electrodes: the common 14 plus the
/// first extra names of the extended cap, in cap order.
pub fn channel_set(count: usize) -> Vec<String> {
    let extra = count.saturating_sub(COMMON_CHANNELS.len());
    let mut taken = 0;
    EXTENDED_CHANNELS
        .iter()
        .filter(|name| {
            if COMMON_CHANNELS.contains(name) {
                true
            } else if taken < extra {
                taken += 1;
                true
            } else {
                false
            }
        })
        .map(|s| s.to_string())
        .collect()
}

fn source_manifest(config: &SynthConfig, d: usize) -> SourceManifest {
    let (label_scheme, dims, range): (LabelScheme, &[&str], [f64; 2]) = match d % 4 {
        0 => (LabelScheme::Discrete3State, &[], [0.0, 1.0]),
        1 => (LabelScheme::Discrete4State, &[], [0.0, 1.0]),
        2 => (
            LabelScheme::Dimensional,
            &["valence", "arousal", "dominance", "liking", "familiarity"],
            [1.0, 9.0],
        ),
        _ => (
            LabelScheme::Dimensional,
            &["valence", "arousal", "dominance"],
            [1.0, 5.0],
        ),
    };
    SourceManifest {
        source_id: d,
        name: format!("synthetic-{d}"),
        channel_names: channel_set(config.channel_count[d]),
        sampling_rate_hz: config.sampling_rate_hz[d],
        label_scheme,
        dimension_names: dims.iter().map(|s| s.to_string()).collect(),
        rating_range: range,
        prior_filtering_hz: None,
    }
}

/// Normalized (valence, arousal, dominance) centre of each planted
/// dimensional cluster: sad, fear, neutral, happy.
const RATING_CENTRES: [[f64; 3]; 4] = [[0.2, 0.25, 0.3], [0.2, 0.8, 0.2], [0.5, 0.5, 0.5], [0.85, 0.65, 0.7]];

fn raw_label<R: Rng>(scheme: LabelScheme, manifest: &SourceManifest, state: EmotionState, rng: &mut R) -> RawLabel {
    let negative_kind = rng.gen_range(0..2usize);
    match scheme {
        LabelScheme::Discrete3State => RawLabel::State(
            match state {
                EmotionState::Negative => "negative",
                EmotionState::Neutral => "neutral",
                EmotionState::Positive => "positive",
            }
            .into(),
        ),
        LabelScheme::Discrete4State => RawLabel::State(
            match state {
                EmotionState::Negative => ["sad", "fear"][negative_kind],
                EmotionState::Neutral => "neutral",
                EmotionState::Positive => "happy",
            }
            .into(),
        ),
        LabelScheme::Dimensional => {
            let cluster = match state {
                EmotionState::Negative => negative_kind,
                EmotionState::Neutral => 2,
                EmotionState::Positive => 3,
            };
            let [lo, hi] = manifest.rating_range;
            let noise = Normal::new(0.0, RATING_SIGMA).unwrap();
            let ratings = (0..manifest.dimension_names.len())
                .map(|k| {
                    let unit = if k < 3 {
                        RATING_CENTRES[cluster][k] + noise.sample(rng)
                    } else {
                        rng.gen::<f64>()
                    };
                    lo + unit.clamp(0.0, 1.0) * (hi - lo)
                })
                .collect();
            RawLabel::Ratings(ratings)
        }
    }
}

/// Per-source nuisance parameters, fixed for the whole corpus.
struct SourceNuisance {
    gains: Vec<f64>,
    tone_weights: Vec<f64>,
    tone_hz: f64,
    ar_coef: f64,
}

fn source_nuisance(config: &SynthConfig, manifest: &SourceManifest) -> SourceNuisance {
    let d = manifest.source_id;
    let mut rng = derived_rng(config.seed, "synth-source", d as u64);
    let ns = config.nuisance_strength;
    let c = manifest.channel_names.len();
    SourceNuisance {
        gains: (0..c)
            .map(|_| 1.0 + ns * GAIN_SPREAD * rng.gen_range(-1.0..1.0))
            .collect(),
        tone_weights: (0..c).map(|_| rng.gen_range(0.5..1.0)).collect(),
        tone_hz: TONE_HZ[d],
        ar_coef: (ns * COLORATION[d % COLORATION.len()]).clamp(-0.95, 0.95),
    }
}

/// Spatial weight of the class oscillation on a named channel; identical in
/// every source.
fn class_pattern(seed: u64, name: &str) -> f64 {
    let h = derive_seed(seed, "synth-pattern", 0) ^ derive_seed(0, name, 0);
    0.5 + 0.5 * (h as f64 / u64::MAX as f64)
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let manifests: Vec<SourceManifest> = (0..config.n_sources).map(|d| source_manifest(config, d)).collect();
    let mut trials = Vec::new();
    let mut states = Vec::new();
    for manifest in &manifests {
        let nuisance = source_nuisance(config, manifest);
        let patterns: Vec<f64> = manifest
            .channel_names
            .iter()
            .map(|n| class_pattern(config.seed, n))
            .collect();
        for subject in 0..config.subjects_per_source {
            let subject_index = (manifest.source_id * config.subjects_per_source + subject) as u64;
            let mut label_rng = derived_rng(config.seed, "synth-labels", subject_index);
            let mut subject_states: Vec<EmotionState> = (0..config.trials_per_subject)
                .map(|t| EmotionState::ALL[t % 3])
                .collect();
            subject_states.shuffle(&mut label_rng);
            for (t, state) in subject_states.into_iter().enumerate() {
                let trial_uid = subject_index * config.trials_per_subject as u64 + t as u64;
                let mut rng = derived_rng(config.seed, "synth-trial", trial_uid);
                let label = raw_label(manifest.label_scheme, manifest, state, &mut rng);
                let signal = trial_signal(config, manifest, &nuisance, &patterns, state, &mut rng);
                trials.push(Trial {
                    signal,
                    channel_names: manifest.channel_names.clone(),
                    sampling_rate_hz: manifest.sampling_rate_hz,
                    raw_label: label,
                    subject_id: subject as u32,
                    source_id: manifest.source_id,
                    trial_uid,
                });
                states.push(state);
            }
        }
    }
    Ok(SynthCorpus {
        manifests,
        trials,
        states,
    })
}

fn trial_signal<R: Rng>(
    config: &SynthConfig,
    manifest: &SourceManifest,
    nuisance: &SourceNuisance,
    patterns: &[f64],
    state: EmotionState,
    rng: &mut R,
) -> Array2<f32> {
    let fs = manifest.sampling_rate_hz;
    let n = (config.trial_seconds * fs).round() as usize;
    let c = manifest.channel_names.len();
    let ns = config.nuisance_strength;

    let class_hz = config.class_band_hz[&state] + rng.gen_range(-FREQ_JITTER_HZ..FREQ_JITTER_HZ);
    let class_phase = rng.gen_range(0.0..2.0 * PI);
    let tone_phase = rng.gen_range(0.0..2.0 * PI);
    let class_wave: Vec<f64> = (0..n)
        .map(|i| (2.0 * PI * class_hz * i as f64 / fs + class_phase).sin())
        .collect();
    let tone_wave: Vec<f64> = (0..n)
        .map(|i| (2.0 * PI * nuisance.tone_hz * i as f64 / fs + tone_phase).sin())
        .collect();

    let rho = nuisance.ar_coef;
    let innovation = Normal::new(0.0, config.noise_std * (1.0 - rho * rho).sqrt()).unwrap();
    let stationary = Normal::new(0.0, config.noise_std).unwrap();

    let mut signal = Array2::<f32>::zeros((c, n));
    for (ch, mut row) in signal.outer_iter_mut().enumerate() {
        let offset = rng.gen_range(-1.0..=1.0) * config.dc_offset;
        let class_amp = config.class_amplitude * patterns[ch];
        let tone_amp = ns * config.tone_amplitude * nuisance.tone_weights[ch];
        let gain = nuisance.gains[ch];
        let mut noise = stationary.sample(rng);
        for (i, v) in row.iter_mut().enumerate() {
            if i > 0 {
                noise = rho * noise + innovation.sample(rng);
            }
            let x = class_amp * class_wave[i] + tone_amp * tone_wave[i] + noise;
            *v = (offset + gain * x) as f32;
        }
    }
    signal
}
