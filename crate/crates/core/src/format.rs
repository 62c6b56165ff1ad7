//! On-disk array format.
//!
//! Each record is a pair of files sharing a stem:
//!
//! * `<stem>.json`: sidecar with shape, sampling rate, labels and IDs;
//! * `<stem>.bin`: 16-byte header followed by little-endian `f32` values in
//!   row-major order (channel-major for signals).
//!
//! Header layout: 8-byte magic `ADVCARR\0`, `u32` format version, `u32`
//! dtype code (1 = f32 little-endian). Writing the values read back from a
//! file reproduces it byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{EmotionState, RawLabel, Trial, WindowSample, WINDOW_CHANNELS, WINDOW_SAMPLES};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"ADVCARR\0";
pub const VERSION: u32 = 1;
pub const DTYPE_F32_LE: u32 = 1;
pub const HEADER_LEN: usize = 16;
const FORMAT_NAME: &str = "advcensor-array";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub shape: Vec<usize>,
    /// Data file name, relative to the sidecar's directory.
    pub data_file: String,
    #[serde(flatten)]
    pub meta: SidecarMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SidecarMeta {
    Trial {
        channel_names: Vec<String>,
        sampling_rate_hz: f64,
        raw_label: RawLabel,
        subject_id: u32,
        source_id: usize,
        trial_uid: u64,
    },
    Windows {
        sampling_rate_hz: f64,
        #[serde(flatten)]
        rows: RowMeta,
    },
    Features {
        feature_names: Vec<String>,
        #[serde(flatten)]
        rows: RowMeta,
    },
}

/// Per-row labels and identities shared by window and feature files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RowMeta {
    pub labels: Vec<EmotionState>,
    pub subject_ids: Vec<u32>,
    pub source_ids: Vec<usize>,
    pub trial_uids: Vec<u64>,
    pub window_indices: Vec<u32>,
}

impl RowMeta {
    pub fn from_windows(windows: &[WindowSample]) -> Self {
        RowMeta {
            labels: windows.iter().map(|w| w.label).collect(),
            subject_ids: windows.iter().map(|w| w.subject_id).collect(),
            source_ids: windows.iter().map(|w| w.source_id).collect(),
            trial_uids: windows.iter().map(|w| w.trial_uid).collect(),
            window_indices: windows.iter().map(|w| w.window_index).collect(),
        }
    }

    fn len_checked(&self) -> Result<usize> {
        let n = self.labels.len();
        let lens = [
            self.subject_ids.len(),
            self.source_ids.len(),
            self.trial_uids.len(),
            self.window_indices.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Format("row metadata arrays have different lengths".into()));
        }
        Ok(n)
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn encode_values(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_values(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < HEADER_LEN || bytes[..8] != MAGIC {
        return Err(Error::Format("missing array header magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let dtype = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported array version {version}")));
    }
    if dtype != DTYPE_F32_LE {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() % 4 != 0 {
        return Err(Error::Format("array body is not a whole number of f32 values".into()));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Create the directory that will hold `path`.
pub(crate) fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Write `<stem>.bin` and `<stem>.json`.
pub fn write_record(stem: &Path, shape: Vec<usize>, values: &[f32], meta: SidecarMeta) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != values.len() {
        return Err(Error::Format(format!(
            "shape {shape:?} needs {expected} values, got {}",
            values.len()
        )));
    }
    let (json_path, bin_path) = paths(stem);
    if let Some(dir) = json_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sidecar = Sidecar {
        format: FORMAT_NAME.into(),
        version: VERSION,
        shape,
        data_file: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        meta,
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut file = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    file.write_all(&encode_values(values))
        .map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Read a record given either its stem or one of its two files.
pub fn read_record(path: &Path) -> Result<(Sidecar, Vec<f32>)> {
    let (json_path, _) = paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    if sidecar.format != FORMAT_NAME || sidecar.version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported sidecar {} v{}",
            json_path.display(),
            sidecar.format,
            sidecar.version
        )));
    }
    let bin_path = json_path.with_file_name(&sidecar.data_file);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let values = decode_values(&bytes)?;
    let expected: usize = sidecar.shape.iter().product();
    if values.len() != expected {
        return Err(Error::Format(format!(
            "{}: shape {:?} needs {expected} values, file holds {}",
            bin_path.display(),
            sidecar.shape,
            values.len()
        )));
    }
    Ok((sidecar, values))
}

pub fn write_trial(stem: &Path, trial: &Trial) -> Result<()> {
    let values: Vec<f32> = trial.signal.iter().copied().collect();
    write_record(
        stem,
        vec![trial.signal.nrows(), trial.signal.ncols()],
        &values,
        SidecarMeta::Trial {
            channel_names: trial.channel_names.clone(),
            sampling_rate_hz: trial.sampling_rate_hz,
            raw_label: trial.raw_label.clone(),
            subject_id: trial.subject_id,
            source_id: trial.source_id,
            trial_uid: trial.trial_uid,
        },
    )
}

pub fn read_trial(path: &Path) -> Result<Trial> {
    let (sidecar, values) = read_record(path)?;
    match (sidecar.meta, sidecar.shape.as_slice()) {
        (
            SidecarMeta::Trial {
                channel_names,
                sampling_rate_hz,
                raw_label,
                subject_id,
                source_id,
                trial_uid,
            },
            &[rows, cols],
        ) => Ok(Trial {
            signal: Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?,
            channel_names,
            sampling_rate_hz,
            raw_label,
            subject_id,
            source_id,
            trial_uid,
        }),
        _ => Err(Error::Format(format!("{}: not a trial record", path.display()))),
    }
}

pub fn write_windows(stem: &Path, windows: &[WindowSample], sampling_rate_hz: f64) -> Result<()> {
    let mut values = Vec::with_capacity(windows.len() * WINDOW_CHANNELS * WINDOW_SAMPLES);
    for w in windows {
        w.check()?;
        values.extend(w.data.iter().copied());
    }
    write_record(
        stem,
        vec![windows.len(), WINDOW_CHANNELS, WINDOW_SAMPLES],
        &values,
        SidecarMeta::Windows {
            sampling_rate_hz,
            rows: RowMeta::from_windows(windows),
        },
    )
}

pub fn read_windows(path: &Path) -> Result<Vec<WindowSample>> {
    let (sidecar, values) = read_record(path)?;
    let rows = match sidecar.meta {
        SidecarMeta::Windows { rows, .. } => rows,
        _ => return Err(Error::Format(format!("{}: not a window record", path.display()))),
    };
    let n = rows.len_checked()?;
    if sidecar.shape != [n, WINDOW_CHANNELS, WINDOW_SAMPLES] {
        return Err(Error::Format(format!(
            "window shape {:?} does not match {n} rows",
            sidecar.shape
        )));
    }
    let block = WINDOW_CHANNELS * WINDOW_SAMPLES;
    (0..n)
        .map(|i| {
            let data = Array2::from_shape_vec(
                (WINDOW_CHANNELS, WINDOW_SAMPLES),
                values[i * block..(i + 1) * block].to_vec(),
            )
            .expect("block has window shape");
            WindowSample::new(
                data,
                rows.labels[i],
                rows.subject_ids[i],
                rows.source_ids[i],
                rows.trial_uids[i],
                rows.window_indices[i],
            )
        })
        .collect()
}

/// Feature matrix `[n × features]` with per-row identities.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f32>,
    pub feature_names: Vec<String>,
    pub rows: RowMeta,
}

pub fn write_features(stem: &Path, features: &FeatureMatrix) -> Result<()> {
    let values: Vec<f32> = features.values.iter().copied().collect();
    write_record(
        stem,
        vec![features.values.nrows(), features.values.ncols()],
        &values,
        SidecarMeta::Features {
            feature_names: features.feature_names.clone(),
            rows: features.rows.clone(),
        },
    )
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let (sidecar, values) = read_record(path)?;
    match (sidecar.meta, sidecar.shape.as_slice()) {
        (SidecarMeta::Features { feature_names, rows }, &[n, f]) => {
            if rows.len_checked()? != n {
                return Err(Error::Format("feature rows do not match metadata".into()));
            }
            Ok(FeatureMatrix {
                values: Array2::from_shape_vec((n, f), values).map_err(|e| Error::Format(e.to_string()))?,
                feature_names,
                rows,
            })
        }
        _ => Err(Error::Format(format!("{}: not a feature record", path.display()))),
    }
}

/// Stack window data into one `[n, 14, 256]` buffer, row-major.
pub fn stack_windows(windows: &[WindowSample]) -> Vec<f32> {
    let mut out = Vec::with_capacity(windows.len() * WINDOW_CHANNELS * WINDOW_SAMPLES);
    for w in windows {
        out.extend(w.data.iter().copied());
    }
    out
}
