//! Welch band-power features and the dense-network baseline built on them.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{WindowSample, WINDOW_CHANNELS, WINDOW_SAMPLES};
use crate::error::{Error, Result};
use crate::format::{FeatureMatrix, RowMeta};
use crate::model::{DenseSpec, EncoderSpec, ModelSpec, Real};
use crate::trainer::{train, TrainConfig, TrainData, TrainOutcome};

pub const SEGMENT_LEN: usize = 128;
pub const SEGMENT_STEP: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDef {
    pub name: String,
    pub lo_hz: f64,
    /// `None` means up to and including Nyquist.
    pub hi_hz: Option<f64>,
}

/// Delta, theta, alpha, beta and gamma.
pub fn default_bands() -> Vec<BandDef> {
    let b = |name: &str, lo: f64, hi: Option<f64>| BandDef {
        name: name.into(),
        lo_hz: lo,
        hi_hz: hi,
    };
    vec![
        b("delta", 1.0, Some(4.0)),
        b("theta", 4.0, Some(7.0)),
        b("alpha", 8.0, Some(13.0)),
        b("beta", 13.0, Some(30.0)),
        b("gamma", 30.0, None),
    ]
}

pub fn feature_names(channels: &[&str], bands: &[BandDef]) -> Vec<String> {
    channels
        .iter()
        .flat_map(|c| bands.iter().map(move |b| format!("{c}_{}", b.name)))
        .collect()
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided Welch power spectral density of `x` (density scaling). Bin `k`
/// is at `k·rate/SEGMENT_LEN` Hz.
pub fn welch(x: &[f64], rate_hz: f64) -> Result<Vec<f64>> {
    if x.len() < SEGMENT_LEN {
        return Err(Error::Shape(format!(
            "need at least {SEGMENT_LEN} samples for a Welch segment, got {}",
            x.len()
        )));
    }
    let w = hann(SEGMENT_LEN);
    let norm = rate_hz * w.iter().map(|v| v * v).sum::<f64>();
    let fft = FftPlanner::new().plan_fft_forward(SEGMENT_LEN);
    let bins = SEGMENT_LEN / 2 + 1;
    let mut psd = vec![0.0; bins];
    let mut count = 0;
    let mut buf = vec![Complex::new(0.0, 0.0); SEGMENT_LEN];
    for start in (0..=x.len() - SEGMENT_LEN).step_by(SEGMENT_STEP) {
        for (b, (&v, &wv)) in buf.iter_mut().zip(x[start..].iter().zip(&w)) {
            *b = Complex::new(v * wv, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            let one_sided = if k == 0 || k == SEGMENT_LEN / 2 { 1.0 } else { 2.0 };
            *p += one_sided * buf[k].norm_sqr() / norm;
        }
        count += 1;
    }
    for p in psd.iter_mut() {
        *p /= count as f64;
    }
    Ok(psd)
}

/// Sum of density × bin width over bins with `lo ≤ f < hi`.
pub fn band_power(psd: &[f64], rate_hz: f64, band: &BandDef) -> f64 {
    let df = rate_hz / SEGMENT_LEN as f64;
    psd.iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * df;
            f >= band.lo_hz && band.hi_hz.is_none_or(|hi| f < hi)
        })
        .map(|(_, p)| p * df)
        .sum()
}

/// Band powers for a 14 × 256 window, channel-major then band.
pub fn psd_features<F: Into<f64> + Copy>(window: ArrayView2<F>, rate_hz: f64) -> Result<Vec<f64>> {
    if window.dim() != (WINDOW_CHANNELS, WINDOW_SAMPLES) {
        return Err(Error::Shape(format!(
            "PSD features need a {WINDOW_CHANNELS}×{WINDOW_SAMPLES} window, got {:?}",
            window.dim()
        )));
    }
    let bands = default_bands();
    let mut out = Vec::with_capacity(WINDOW_CHANNELS * bands.len());
    for row in window.outer_iter() {
        let x: Vec<f64> = row.iter().map(|&v| v.into()).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite sample in window".into()));
        }
        let psd = welch(&x, rate_hz)?;
        out.extend(bands.iter().map(|b| band_power(&psd, rate_hz, b)));
    }
    Ok(out)
}

/// Feature matrix for a set of windows, with their row metadata.
pub fn feature_matrix(windows: &[WindowSample], channels: &[&str], rate_hz: f64) -> Result<FeatureMatrix> {
    let bands = default_bands();
    let width = channels.len() * bands.len();
    let mut values = Array2::zeros((windows.len(), width));
    for (mut row, w) in values.outer_iter_mut().zip(windows) {
        let f = psd_features(w.data.view(), rate_hz)?;
        for (r, v) in row.iter_mut().zip(f) {
            *r = v as f32;
        }
    }
    Ok(FeatureMatrix {
        values,
        feature_names: feature_names(channels, &bands),
        rows: RowMeta::from_windows(windows),
    })
}

/// Dense-network model over `input_dim` features: 128 ELU units with
/// dropout 0.5 feeding both heads.
pub fn mlp_spec(input_dim: usize, num_classes: usize, num_sources: usize) -> ModelSpec {
    ModelSpec {
        encoder: EncoderSpec::Dense(DenseSpec::new(input_dim)),
        num_classes,
        num_sources,
    }
}

/// Train the feature MLP with the shared adversarial trainer.
pub fn train_psd_mlp<F: Real>(
    data: &TrainData<F>,
    num_classes: usize,
    num_sources: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    let spec = mlp_spec(data.train.x.ncols(), num_classes, num_sources);
    train(spec, data, cfg)
}
