//! Label/subject/source balancing by undersampling, and stratified splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{EmotionState, SubjectKey, WindowId, WindowSample};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedCorpus {
    pub samples: Vec<WindowSample>,
    /// Windows per (source, subject, label) cell.
    pub per_cell_count: usize,
    pub subjects_per_source: usize,
}

fn sort_key(w: &WindowSample) -> (usize, u32, u64, u32) {
    (w.source_id, w.subject_id, w.trial_uid, w.window_index)
}

/// Draw `n` members uniformly at random. Members are first put in window-id
/// order so the draw does not depend on input order.
fn undersample(mut members: Vec<usize>, n: usize, samples: &[WindowSample], seed: u64) -> Vec<usize> {
    members.sort_by_key(|&i| samples[i].id());
    members.shuffle(&mut rng_from(seed));
    members.truncate(n);
    members
}

type Cells = BTreeMap<SubjectKey, BTreeMap<EmotionState, Vec<usize>>>;

/// Undersample to equal label counts per subject, equal counts in every
/// (source, subject, label) cell, and an equal number of subjects per
/// source.
pub fn balance(samples: Vec<WindowSample>, seed: u64) -> Result<BalancedCorpus> {
    if samples.is_empty() {
        return Err(Error::Sampling("no samples to balance".into()));
    }
    let sources: BTreeSet<usize> = samples.iter().map(|w| w.source_id).collect();
    let mut cells: Cells = BTreeMap::new();
    for (i, w) in samples.iter().enumerate() {
        cells
            .entry(w.subject_key())
            .or_default()
            .entry(w.label)
            .or_default()
            .push(i);
    }
    let num_labels = samples.iter().map(|w| w.label).collect::<BTreeSet<_>>().len();
    let original_totals: BTreeMap<SubjectKey, usize> = cells
        .iter()
        .map(|(k, by_label)| (*k, by_label.values().map(Vec::len).sum()))
        .collect();

    cells.retain(|key, by_label| {
        let complete = by_label.len() == num_labels;
        if !complete {
            warn!(
                "dropping subject {} of source {}: only {} of {num_labels} labels present",
                key.subject_id,
                key.source_id,
                by_label.len()
            );
        }
        complete
    });

    let cell_seed = |key: &SubjectKey, label: EmotionState, stage: u64| {
        derive_seed(
            seed,
            "balance",
            (key.source_id as u64) << 40 | (key.subject_id as u64) << 8 | (label as u64) << 4 | stage,
        )
    };

    // Per subject: every label down to that subject's rarest label.
    for (key, by_label) in cells.iter_mut() {
        let m = by_label.values().map(Vec::len).min().unwrap_or(0);
        for (label, members) in by_label.iter_mut() {
            *members = undersample(std::mem::take(members), m, &samples, cell_seed(key, *label, 0));
        }
    }

    // Globally: every cell down to the smallest cell.
    let per_cell_count = cells.values().flat_map(|b| b.values().map(Vec::len)).min().unwrap_or(0);
    for (key, by_label) in cells.iter_mut() {
        for (label, members) in by_label.iter_mut() {
            *members = undersample(
                std::mem::take(members),
                per_cell_count,
                &samples,
                cell_seed(key, *label, 1),
            );
        }
    }

    // Same number of subjects per source: keep those with the most windows.
    let mut per_source: BTreeMap<usize, Vec<SubjectKey>> = BTreeMap::new();
    for key in cells.keys() {
        per_source.entry(key.source_id).or_default().push(*key);
    }
    for source in &sources {
        if !per_source.contains_key(source) {
            return Err(Error::Sampling(format!(
                "source {source} has no subject with every label"
            )));
        }
    }
    let subjects_per_source = per_source.values().map(Vec::len).min().unwrap_or(0);
    let mut kept = BTreeSet::new();
    for subjects in per_source.values_mut() {
        subjects.sort_by(|a, b| {
            original_totals[b]
                .cmp(&original_totals[a])
                .then(a.subject_id.cmp(&b.subject_id))
        });
        kept.extend(subjects.iter().take(subjects_per_source).copied());
    }

    let mut out: Vec<WindowSample> = cells
        .iter()
        .filter(|(k, _)| kept.contains(k))
        .flat_map(|(_, b)| b.values().flatten().map(|&i| samples[i].clone()))
        .collect();
    out.sort_by_key(sort_key);
    Ok(BalancedCorpus {
        samples: out,
        per_cell_count,
        subjects_per_source,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Window identifiers per split, as persisted to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMembership {
    pub train: Vec<WindowId>,
    pub val: Vec<WindowId>,
    pub test: Vec<WindowId>,
}

impl Splits {
    pub fn membership(&self) -> SplitMembership {
        let ids = |v: &[WindowSample]| v.iter().map(WindowSample::id).collect();
        SplitMembership {
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }

    pub fn parts(&self) -> [&Vec<WindowSample>; 3] {
        [&self.train, &self.val, &self.test]
    }
}

impl SplitMembership {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::format::create_parent(path)?;
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Largest-remainder apportionment of `total` items over `ratios`.
fn apportion(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    Ok(())
}

/// Stratified train/validation/test split.
///
/// Window mode splits every (source, subject, label) cell with the same
/// apportionment, so each split is exactly balanced. With `group_by_trial`,
/// whole trials are assigned within each (source, label) cell, greedily
/// toward the target ratios; balance is then approximate.
pub fn stratified_split(corpus: &BalancedCorpus, ratios: [f64; 3], group_by_trial: bool, seed: u64) -> Result<Splits> {
    check_ratios(ratios)?;
    let samples = &corpus.samples;
    let mut parts: [Vec<usize>; 3] = Default::default();
    if !group_by_trial {
        let mut cells: BTreeMap<(usize, u32, EmotionState), Vec<usize>> = BTreeMap::new();
        for (i, w) in samples.iter().enumerate() {
            cells.entry((w.source_id, w.subject_id, w.label)).or_default().push(i);
        }
        for ((source, subject, label), members) in cells {
            let counts = apportion(members.len(), ratios);
            if counts.contains(&0) {
                return Err(Error::Sampling(format!(
                    "cell (source {source}, subject {subject}, label {label:?}) has {} windows, too few for three splits",
                    members.len()
                )));
            }
            let key = (source as u64) << 40 | (subject as u64) << 8 | label as u64;
            let shuffled = undersample(members.clone(), members.len(), samples, derive_seed(seed, "split", key));
            let mut it = shuffled.into_iter();
            for (part, &n) in parts.iter_mut().zip(&counts) {
                part.extend(it.by_ref().take(n));
            }
        }
    } else {
        let mut cells: BTreeMap<(usize, EmotionState), BTreeMap<u64, Vec<usize>>> = BTreeMap::new();
        for (i, w) in samples.iter().enumerate() {
            cells
                .entry((w.source_id, w.label))
                .or_default()
                .entry(w.trial_uid)
                .or_default()
                .push(i);
        }
        for ((source, label), groups) in cells {
            let total: usize = groups.values().map(Vec::len).sum();
            let mut order: Vec<u64> = groups.keys().copied().collect();
            let key = (source as u64) << 8 | label as u64;
            order.shuffle(&mut rng_from(derive_seed(seed, "split-grouped", key)));
            let targets: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
            let mut filled = [0usize; 3];
            let mut assigned: [Vec<usize>; 3] = Default::default();
            for uid in order {
                let members = &groups[&uid];
                // Prefer an empty split, then the largest relative deficit.
                let target = (0..3)
                    .max_by(|&a, &b| {
                        let da = (targets[a] - filled[a] as f64) / targets[a];
                        let db = (targets[b] - filled[b] as f64) / targets[b];
                        (filled[a] == 0)
                            .cmp(&(filled[b] == 0))
                            .then(da.total_cmp(&db))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                filled[target] += members.len();
                assigned[target].extend(members.iter().copied());
            }
            if assigned.iter().any(Vec::is_empty) {
                return Err(Error::Sampling(format!(
                    "cell (source {source}, label {label:?}) has too few trials for three splits"
                )));
            }
            for (part, a) in parts.iter_mut().zip(assigned) {
                part.extend(a);
            }
        }
    }
    let collect = |idx: &[usize]| {
        let mut v: Vec<WindowSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        v.sort_by_key(sort_key);
        v
    };
    Ok(Splits {
        train: collect(&parts[0]),
        val: collect(&parts[1]),
        test: collect(&parts[2]),
    })
}
