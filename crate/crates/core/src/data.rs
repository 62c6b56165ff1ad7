//! Shared data model: trials, source manifests and preprocessed windows.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 14 electrodes present in every supported source, in canonical order.
pub const COMMON_CHANNELS: [&str; 14] = [
    "AF3", "AF4", "F3", "F4", "F7", "F8", "FC5", "FC6", "O1", "O2", "P7", "P8", "T7", "T8",
];

pub const WINDOW_CHANNELS: usize = 14;
pub const WINDOW_SAMPLES: usize = 256;

/// Number of harmonized emotion states.
pub const NUM_STATES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelScheme {
    #[serde(rename = "discrete_3state")]
    Discrete3State,
    #[serde(rename = "discrete_4state")]
    Discrete4State,
    #[serde(rename = "dimensional")]
    Dimensional,
}

impl std::fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LabelScheme::Discrete3State => "discrete_3state",
            LabelScheme::Discrete4State => "discrete_4state",
            LabelScheme::Dimensional => "dimensional",
        };
        f.write_str(s)
    }
}

/// Source-specific label payload before harmonization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawLabel {
    State(String),
    Ratings(Vec<f64>),
}

/// Per-source metadata. Serialized as JSON; see `docs/formats.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub source_id: usize,
    pub name: String,
    pub channel_names: Vec<String>,
    pub sampling_rate_hz: f64,
    pub label_scheme: LabelScheme,
    #[serde(default)]
    pub dimension_names: Vec<String>,
    #[serde(default = "default_rating_range")]
    pub rating_range: [f64; 2],
    #[serde(default)]
    pub prior_filtering_hz: Option<[f64; 2]>,
}

fn default_rating_range() -> [f64; 2] {
    [0.0, 1.0]
}

impl SourceManifest {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Manifest(format!(
                "source {} ({}): {msg}",
                self.source_id, self.name
            )))
        };
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return fail(format!("sampling_rate_hz must be > 0, got {}", self.sampling_rate_hz));
        }
        let mut seen = HashSet::new();
        for name in &self.channel_names {
            if !seen.insert(name.trim()) {
                return fail(format!("duplicate channel {name:?}"));
            }
        }
        if self.label_scheme == LabelScheme::Dimensional {
            for required in ["valence", "arousal"] {
                if self.dimension_index(required).is_none() {
                    return fail(format!("dimensional scheme requires a {required} dimension"));
                }
            }
            let [lo, hi] = self.rating_range;
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return fail(format!("rating_range must satisfy lo < hi, got [{lo}, {hi}]"));
            }
        }
        if let Some([lo, hi]) = self.prior_filtering_hz {
            if !(lo >= 0.0 && lo < hi) {
                return fail(format!(
                    "prior_filtering_hz must satisfy 0 <= lo < hi, got [{lo}, {hi}]"
                ));
            }
        }
        Ok(())
    }

    /// Case-insensitive lookup of a rating dimension.
    pub fn dimension_index(&self, name: &str) -> Option<usize> {
        self.dimension_names
            .iter()
            .position(|d| d.trim().eq_ignore_ascii_case(name))
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c.trim() == name.trim())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: SourceManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// One recording epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    /// `[channels × samples]`, microvolts.
    pub signal: Array2<f32>,
    pub channel_names: Vec<String>,
    pub sampling_rate_hz: f64,
    pub raw_label: RawLabel,
    pub subject_id: u32,
    pub source_id: usize,
    /// Unique across the whole corpus; carried onto every window.
    pub trial_uid: u64,
}

impl Trial {
    pub fn subject_key(&self) -> SubjectKey {
        SubjectKey {
            source_id: self.source_id,
            subject_id: self.subject_id,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.signal.ncols()
    }
}

/// Subject identity disambiguated by source: subject numbering is only
/// meaningful inside one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubjectKey {
    pub source_id: usize,
    pub subject_id: u32,
}

/// Harmonized emotion state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum EmotionState {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl EmotionState {
    pub const ALL: [EmotionState; 3] = [EmotionState::Negative, EmotionState::Neutral, EmotionState::Positive];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u8> for EmotionState {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            0 => Ok(EmotionState::Negative),
            1 => Ok(EmotionState::Neutral),
            2 => Ok(EmotionState::Positive),
            other => Err(Error::UnknownState(other.to_string())),
        }
    }
}

impl From<EmotionState> for u8 {
    fn from(s: EmotionState) -> u8 {
        s as u8
    }
}

/// A trial whose label has been mapped to the common three-state model.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrial {
    pub trial: Trial,
    pub state: EmotionState,
}

/// Window identity: origin trial plus position inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowId {
    pub trial_uid: u64,
    pub index: u32,
}

/// One preprocessed `14 × 256` segment.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub data: Array2<f32>,
    pub label: EmotionState,
    pub subject_id: u32,
    pub source_id: usize,
    pub trial_uid: u64,
    pub window_index: u32,
}

impl WindowSample {
    pub fn new(
        data: Array2<f32>,
        label: EmotionState,
        subject_id: u32,
        source_id: usize,
        trial_uid: u64,
        window_index: u32,
    ) -> Result<Self> {
        let w = WindowSample {
            data,
            label,
            subject_id,
            source_id,
            trial_uid,
            window_index,
        };
        w.check()?;
        Ok(w)
    }

    pub fn check(&self) -> Result<()> {
        if self.data.dim() != (WINDOW_CHANNELS, WINDOW_SAMPLES) {
            return Err(Error::Shape(format!(
                "window {}:{} has shape {:?}, expected ({WINDOW_CHANNELS}, {WINDOW_SAMPLES})",
                self.trial_uid,
                self.window_index,
                self.data.dim()
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                source_id: self.source_id,
                trial_uid: self.trial_uid,
                channel: pos / WINDOW_SAMPLES,
                index: pos % WINDOW_SAMPLES,
            });
        }
        Ok(())
    }

    pub fn id(&self) -> WindowId {
        WindowId {
            trial_uid: self.trial_uid,
            index: self.window_index,
        }
    }

    pub fn subject_key(&self) -> SubjectKey {
        SubjectKey {
            source_id: self.source_id,
            subject_id: self.subject_id,
        }
    }
}

/// Check a trial against its source manifest. Returns the trial unchanged
/// when every invariant holds.
pub fn validate_trial(trial: Trial, manifest: &SourceManifest) -> Result<Trial> {
    let ident = (trial.source_id, trial.trial_uid);
    if trial.source_id != manifest.source_id {
        return Err(Error::Manifest(format!(
            "trial {} claims source {} but manifest is source {}",
            trial.trial_uid, trial.source_id, manifest.source_id
        )));
    }
    if trial.signal.nrows() != trial.channel_names.len() {
        return Err(Error::ShapeMismatch {
            source_id: ident.0,
            trial_uid: ident.1,
            rows: trial.signal.nrows(),
            names: trial.channel_names.len(),
        });
    }
    if !(trial.sampling_rate_hz.is_finite() && trial.sampling_rate_hz > 0.0) {
        return Err(Error::Manifest(format!(
            "trial {} has sampling rate {}",
            trial.trial_uid, trial.sampling_rate_hz
        )));
    }
    for name in &trial.channel_names {
        if manifest.channel_index(name).is_none() {
            return Err(Error::UnknownChannel {
                source_id: ident.0,
                trial_uid: ident.1,
                channel: name.clone(),
            });
        }
    }
    for (c, row) in trial.signal.outer_iter().enumerate() {
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                source_id: ident.0,
                trial_uid: ident.1,
                channel: c,
                index: i,
            });
        }
    }
    let label_ok = match (&trial.raw_label, manifest.label_scheme) {
        (RawLabel::State(_), LabelScheme::Discrete3State | LabelScheme::Discrete4State) => true,
        (RawLabel::Ratings(r), LabelScheme::Dimensional) => {
            let [lo, hi] = manifest.rating_range;
            r.len() == manifest.dimension_names.len() && r.iter().all(|v| v.is_finite() && *v >= lo && *v <= hi)
        }
        _ => false,
    };
    if !label_ok {
        return Err(Error::LabelScheme {
            source_id: ident.0,
            trial_uid: ident.1,
            scheme: manifest.label_scheme.to_string(),
        });
    }
    Ok(trial)
}

/// The four reference sources as bundled metadata-only manifests.
pub mod bundled {
    use super::SourceManifest;

    pub const SEED: &str = include_str!("../manifests/seed.json");
    pub const SEED_IV: &str = include_str!("../manifests/seed_iv.json");
    pub const DEAP: &str = include_str!("../manifests/deap.json");
    pub const DREAMER: &str = include_str!("../manifests/dreamer.json");

    pub fn all() -> Vec<SourceManifest> {
        [SEED, SEED_IV, DEAP, DREAMER]
            .iter()
            .map(|text| serde_json::from_str(text).expect("bundled manifest is valid JSON"))
            .collect()
    }
}
