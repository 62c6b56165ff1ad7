//! Harmonization of heterogeneous label schemes into the three-state model.
//!
//! Discrete schemes map by name. Dimensional ratings are clustered with
//! k-means (k = 4) over valence, arousal and dominance, each min-max
//! normalized with the source's rating range; clusters then receive the
//! states sad, fear, happy and neutral from their centroid positions.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmotionState, LabelScheme, LabeledTrial, RawLabel, SourceManifest, Trial};
use crate::error::{Error, Result};
use crate::seed::rng_from;

pub const NUM_CLUSTERS: usize = 4;
pub const RESTARTS: usize = 10;
pub const MAX_ITER: usize = 300;
pub const SHIFT_TOL: f64 = 1e-8;

const CLUSTER_DIMENSIONS: [&str; 3] = ["valence", "arousal", "dominance"];

pub fn map_discrete_3state(raw: &str) -> Result<EmotionState> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "negative" => Ok(EmotionState::Negative),
        "neutral" => Ok(EmotionState::Neutral),
        "positive" => Ok(EmotionState::Positive),
        _ => Err(Error::UnknownState(raw.to_string())),
    }
}

/// sad, fear → negative; neutral → neutral; happy → positive.
pub fn map_discrete_4state(raw: &str) -> Result<EmotionState> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "sad" | "fear" => Ok(EmotionState::Negative),
        "neutral" => Ok(EmotionState::Neutral),
        "happy" => Ok(EmotionState::Positive),
        _ => Err(Error::UnknownState(raw.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub assignments: Vec<usize>,
    /// `k × D`.
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus<R: Rng>(points: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.gen_range(0..n)));
    let mut dist: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for j in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, centroids.row(j)));
        }
    }
    centroids
}

fn lloyd(points: &Array2<f64>, mut centroids: Array2<f64>) -> KMeansFit {
    let (n, dims) = points.dim();
    let k = centroids.nrows();
    let mut assignments = vec![0usize; n];
    for _ in 0..MAX_ITER {
        for (i, p) in points.outer_iter().enumerate() {
            assignments[i] = nearest(p, &centroids).0;
        }
        let mut sums = Array2::<f64>::zeros((k, dims));
        let mut counts = vec![0usize; k];
        for (i, p) in points.outer_iter().enumerate() {
            let mut row = sums.row_mut(assignments[i]);
            row += &p;
            counts[assignments[i]] += 1;
        }
        let mut updated = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                updated.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = points
                    .outer_iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, centroids.row(assignments[i]))))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                updated.row_mut(j).assign(&points.row(far));
            }
        }
        let shift = updated
            .outer_iter()
            .zip(centroids.outer_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < SHIFT_TOL {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.outer_iter().enumerate() {
        let (j, d) = nearest(p, &centroids);
        assignments[i] = j;
        inertia += d;
    }
    KMeansFit {
        assignments,
        centroids,
        inertia,
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of [`RESTARTS`] runs by
/// inertia.
pub fn fit_kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Result<KMeansFit> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::Clustering("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Clustering(format!("{n} points cannot form {k} clusters")));
    }
    if points.ncols() == 0 || points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Clustering(
            "points must be finite with at least one dimension".into(),
        ));
    }
    let mut distinct: Vec<Vec<u64>> = points
        .outer_iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Clustering(format!(
            "only {} distinct points for {k} clusters",
            distinct.len()
        )));
    }
    let mut rng = rng_from(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..RESTARTS {
        let fit = lloyd(points, kmeans_plus_plus(points, k, &mut rng));
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Name each of four centroids. Highest valence → happy; among the rest,
/// smallest valence + arousal → sad, then smallest valence − arousal →
/// fear; the last one → neutral. Ties go to the lower cluster index.
pub fn assign_clusters_to_states(
    centroids: &Array2<f64>,
    dimension_names: &[String],
    rating_range: [f64; 2],
) -> Result<Vec<EmotionState>> {
    if centroids.nrows() != NUM_CLUSTERS {
        return Err(Error::Clustering(format!(
            "expected {NUM_CLUSTERS} centroids, got {}",
            centroids.nrows()
        )));
    }
    let find = |name: &str| {
        dimension_names
            .iter()
            .position(|d| d.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Clustering(format!("missing {name} dimension")))
    };
    let (vi, ai) = (find("valence")?, find("arousal")?);
    let [lo, hi] = rating_range;
    let norm = |v: f64| (v - lo) / (hi - lo);
    let va: Vec<(f64, f64)> = centroids.outer_iter().map(|c| (norm(c[vi]), norm(c[ai]))).collect();

    // Strictly-better comparisons keep the first (lowest) index on ties.
    let pick = |remaining: &[usize], key: &dyn Fn(usize) -> f64, maximize: bool| -> usize {
        let mut best = remaining[0];
        for &j in &remaining[1..] {
            let better = if maximize {
                key(j) > key(best)
            } else {
                key(j) < key(best)
            };
            if better {
                best = j;
            }
        }
        best
    };
    let mut remaining: Vec<usize> = (0..NUM_CLUSTERS).collect();
    let mut states = vec![EmotionState::Neutral; NUM_CLUSTERS];

    let happy = pick(&remaining, &|j| va[j].0, true);
    states[happy] = EmotionState::Positive;
    remaining.retain(|&j| j != happy);
    let sad = pick(&remaining, &|j| va[j].0 + va[j].1, false);
    states[sad] = EmotionState::Negative;
    remaining.retain(|&j| j != sad);
    let fear = pick(&remaining, &|j| va[j].0 - va[j].1, false);
    states[fear] = EmotionState::Negative;
    remaining.retain(|&j| j != fear);
    states[remaining[0]] = EmotionState::Neutral;
    Ok(states)
}

/// Fitted clustering for one dimensional source, kept for audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub source_id: usize,
    pub k: usize,
    /// Centroids in the source's rating units, one row per cluster.
    pub centroids: Vec<Vec<f64>>,
    pub dimension_names: Vec<String>,
    pub cluster_to_state: Vec<EmotionState>,
    pub rating_range: [f64; 2],
    pub seed: u64,
    pub inertia: f64,
}

impl ClusterModel {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::format::create_parent(path)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Harmonized {
    pub trials: Vec<LabeledTrial>,
    pub cluster_model: Option<ClusterModel>,
}

fn state_label(trial: &Trial) -> Result<&str> {
    match &trial.raw_label {
        RawLabel::State(s) => Ok(s),
        RawLabel::Ratings(_) => Err(Error::LabelScheme {
            source_id: trial.source_id,
            trial_uid: trial.trial_uid,
            scheme: "discrete".into(),
        }),
    }
}

/// Map every trial of one source to the common three-state model.
pub fn harmonize_source(trials: Vec<Trial>, manifest: &SourceManifest, seed: u64) -> Result<Harmonized> {
    match manifest.label_scheme {
        LabelScheme::Discrete3State | LabelScheme::Discrete4State => {
            let map = if manifest.label_scheme == LabelScheme::Discrete3State {
                map_discrete_3state
            } else {
                map_discrete_4state
            };
            let labeled = trials
                .into_iter()
                .map(|t| {
                    let state = map(state_label(&t)?)?;
                    Ok(LabeledTrial { trial: t, state })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Harmonized {
                trials: labeled,
                cluster_model: None,
            })
        }
        LabelScheme::Dimensional => harmonize_dimensional(trials, manifest, seed),
    }
}

fn harmonize_dimensional(trials: Vec<Trial>, manifest: &SourceManifest, seed: u64) -> Result<Harmonized> {
    let dims: Vec<(usize, String)> = CLUSTER_DIMENSIONS
        .iter()
        .filter_map(|d| manifest.dimension_index(d).map(|i| (i, d.to_string())))
        .collect();
    if dims.len() < 2 {
        return Err(Error::Manifest(format!(
            "source {} lacks valence/arousal dimensions",
            manifest.source_id
        )));
    }
    let [lo, hi] = manifest.rating_range;
    let mut points = Array2::zeros((trials.len(), dims.len()));
    for (row, t) in trials.iter().enumerate() {
        let ratings = match &t.raw_label {
            RawLabel::Ratings(r) if r.len() == manifest.dimension_names.len() => r,
            _ => {
                return Err(Error::LabelScheme {
                    source_id: t.source_id,
                    trial_uid: t.trial_uid,
                    scheme: manifest.label_scheme.to_string(),
                })
            }
        };
        for (col, (idx, _)) in dims.iter().enumerate() {
            points[[row, col]] = (ratings[*idx] - lo) / (hi - lo);
        }
    }
    let fit = fit_kmeans(&points, NUM_CLUSTERS, seed)?;
    let raw_centroids = fit.centroids.mapv(|v| lo + v * (hi - lo));
    let names: Vec<String> = dims.iter().map(|(_, n)| n.clone()).collect();
    let mapping = assign_clusters_to_states(&raw_centroids, &names, manifest.rating_range)?;
    let labeled = trials
        .into_iter()
        .zip(&fit.assignments)
        .map(|(trial, &a)| LabeledTrial {
            trial,
            state: mapping[a],
        })
        .collect();
    Ok(Harmonized {
        trials: labeled,
        cluster_model: Some(ClusterModel {
            source_id: manifest.source_id,
            k: NUM_CLUSTERS,
            centroids: raw_centroids.outer_iter().map(|r| r.to_vec()).collect(),
            dimension_names: names,
            cluster_to_state: mapping,
            rating_range: manifest.rating_range,
            seed,
            inertia: fit.inertia,
        }),
    })
}
