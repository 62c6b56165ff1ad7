//! Unification pipeline: common-channel selection, downsampling to a common
//! rate, baseline removal, zero-phase bandpass and fixed-length windowing.

pub mod filter;
pub mod resample;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{validate_trial, LabeledTrial, SourceManifest, Trial, WindowSample, COMMON_CHANNELS};
use crate::error::{Error, Result};

pub use filter::{bandpass, butter_bandpass, Sos};
pub use resample::resample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub common_channels: Vec<String>,
    pub target_rate_hz: f64,
    pub baseline_seconds: f64,
    pub band_hz: [f64; 2],
    pub filter_order: usize,
    pub window_seconds: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            common_channels: COMMON_CHANNELS.iter().map(|s| s.to_string()).collect(),
            target_rate_hz: 128.0,
            baseline_seconds: 3.0,
            band_hz: [4.0, 45.0],
            filter_order: 4,
            window_seconds: 2.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("preprocess: {m}")));
        let [lo, hi] = self.band_hz;
        if !(lo > 0.0 && lo < hi && hi < self.target_rate_hz / 2.0) {
            return fail(format!(
                "band [{lo}, {hi}] must satisfy 0 < lo < hi < {}",
                self.target_rate_hz / 2.0
            ));
        }
        if self.filter_order < 1 {
            return fail("filter_order must be >= 1".into());
        }
        if self.common_channels.is_empty() {
            return fail("common_channels is empty".into());
        }
        self.window_len()?;
        if !(self.baseline_seconds >= 0.0) {
            return fail("baseline_seconds must be >= 0".into());
        }
        Ok(())
    }

    /// Samples per window at the target rate.
    pub fn window_len(&self) -> Result<usize> {
        window_len(self.target_rate_hz, self.window_seconds)
    }
}

fn window_len(rate_hz: f64, window_seconds: f64) -> Result<usize> {
    let exact = rate_hz * window_seconds;
    if !(exact >= 1.0) || (exact - exact.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "window of {window_seconds} s at {rate_hz} Hz is not a whole number of samples"
        )));
    }
    Ok(exact.round() as usize)
}

/// Keep the requested channels, in the requested order.
pub fn select_channels(trial: &Trial, channels: &[String]) -> Result<Trial> {
    let rows = channels
        .iter()
        .map(|want| {
            trial
                .channel_names
                .iter()
                .position(|have| have.trim() == want.trim())
                .ok_or_else(|| Error::MissingChannel(want.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut signal = Array2::zeros((rows.len(), trial.signal.ncols()));
    for (dst, &src) in rows.iter().enumerate() {
        signal.row_mut(dst).assign(&trial.signal.row(src));
    }
    Ok(Trial {
        signal,
        channel_names: channels.iter().map(|c| c.trim().to_string()).collect(),
        ..trial.clone()
    })
}

/// Subtract from each channel its mean over the first `baseline_seconds`.
pub fn remove_baseline(signal: &Array2<f64>, rate_hz: f64, baseline_seconds: f64) -> Result<Array2<f64>> {
    let span = (baseline_seconds * rate_hz).round() as usize;
    if signal.ncols() < span {
        return Err(Error::Signal(format!(
            "trial has {} samples, shorter than the {span}-sample baseline",
            signal.ncols()
        )));
    }
    let mut out = signal.clone();
    if span == 0 {
        return Ok(out);
    }
    for mut row in out.outer_iter_mut() {
        let mean = row.slice(s![..span]).sum() / span as f64;
        row.mapv_inplace(|v| v - mean);
    }
    Ok(out)
}

/// Consecutive non-overlapping windows; a trailing partial window is dropped.
pub fn window(signal: &Array2<f64>, rate_hz: f64, window_seconds: f64) -> Result<Vec<Array2<f64>>> {
    let len = window_len(rate_hz, window_seconds)?;
    let count = signal.ncols() / len;
    Ok((0..count)
        .map(|k| signal.slice(s![.., k * len..(k + 1) * len]).to_owned())
        .collect())
}

/// The canonical stage order: select → resample → baseline → bandpass →
/// window. Every output window carries the trial's harmonized label and uid.
pub fn run_pipeline(
    labeled: &LabeledTrial,
    manifest: &SourceManifest,
    config: &PreprocessConfig,
) -> Result<Vec<WindowSample>> {
    config.validate()?;
    let trial = validate_trial(labeled.trial.clone(), manifest)?;
    let selected = select_channels(&trial, &config.common_channels)?;
    let raw = selected.signal.mapv(f64::from);
    let resampled = resample(&raw, trial.sampling_rate_hz, config.target_rate_hz)?;
    let centred = remove_baseline(&resampled, config.target_rate_hz, config.baseline_seconds)?;
    let filtered = bandpass(&centred, config.target_rate_hz, config.band_hz, config.filter_order)?;
    window(&filtered, config.target_rate_hz, config.window_seconds)?
        .into_iter()
        .enumerate()
        .map(|(k, w)| {
            WindowSample::new(
                w.mapv(|v| v as f32),
                labeled.state,
                trial.subject_id,
                trial.source_id,
                trial.trial_uid,
                k as u32,
            )
        })
        .collect()
}
