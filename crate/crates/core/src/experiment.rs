//! End-to-end study runner: data → harmonize → preprocess → balance → split →
//! train for every (λ, repetition), with CSV/JSON outputs and SVG plots.
//!
//! Seeds fan out from the master seed with [`derive_seed`]:
//!
//! | stage              | tag           | index       |
//! |--------------------|---------------|-------------|
//! | label harmonizing  | `"harmonize"` | source id   |
//! | balancing          | `"balance"`   | repetition  |
//! | splitting          | `"split"`     | repetition  |
//! | training           | `"train"`     | repetition  |
//!
//! None of them depend on λ, so every λ of a repetition sees the same split,
//! initial weights and batch order, and any single run can be repeated alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{validate_trial, LabeledTrial, SourceManifest, Trial, WindowSample};
use crate::error::{Error, Result};
use crate::format::{read_trial, write_trial, write_windows};
use crate::labelmap::{harmonize_source, ClusterModel};
use crate::model::{ConvSpec, EncoderSpec, ModelSpec, Real};
use crate::plot;
use crate::preprocess::{run_pipeline, PreprocessConfig};
use crate::psd::{mlp_spec, psd_features};
use crate::sampling::{balance, stratified_split, SplitMembership};
use crate::seed::derive_seed;
use crate::synth::{generate, SynthConfig};
use crate::trainer::{evaluate, nb_probe, train, LabelSpace, TensorSet, TrainConfig, TrainData, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    /// Paths to ingest documents (see [`IngestManifest`]).
    Manifests(Vec<PathBuf>),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthConfig::default())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    TimeseriesDnn,
    PsdMlp,
    TimeseriesBinary,
}

impl Mode {
    pub fn binary(self) -> bool {
        self == Mode::TimeseriesBinary
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Whole-study configuration. Every field has a default, so `{}` is valid.
/// `trainer.lambda` and `trainer.seed` are replaced per run by the grid value
/// and the derived training seed; `trainer.binary_mode` follows `mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub preprocess: PreprocessConfig,
    pub trainer: TrainConfig,
    pub lambda_grid: Vec<f64>,
    pub repetitions: usize,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub seed: u64,
    pub split_ratios: [f64; 3],
    pub group_by_trial: bool,
    pub precision: Precision,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            preprocess: PreprocessConfig::default(),
            trainer: TrainConfig::default(),
            lambda_grid: vec![0.0, 0.01, 0.05, 0.1, 0.5],
            repetitions: 5,
            output_dir: PathBuf::from("results"),
            mode: Mode::default(),
            seed: 0,
            split_ratios: [0.6, 0.2, 0.2],
            group_by_trial: false,
            precision: Precision::default(),
            save_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.repetitions < 1 {
            return fail("repetitions must be >= 1");
        }
        if self.lambda_grid.is_empty() {
            return fail("lambda_grid is empty");
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return fail("lambda_grid values must be finite and >= 0");
        }
        let mut seen = self.lambda_grid.clone();
        seen.sort_by(f64::total_cmp);
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return fail("lambda_grid has duplicates");
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        self.preprocess.validate()?;
        self.run_config(0.0, 0).validate()
    }

    /// Trainer configuration of one run.
    pub fn run_config(&self, lambda: f64, repetition: usize) -> TrainConfig {
        TrainConfig {
            lambda,
            seed: derive_seed(self.seed, "train", repetition as u64),
            binary_mode: self.mode.binary(),
            ..self.trainer.clone()
        }
    }
}

/// Ingest document: one source's manifest plus its trial records. Trial
/// paths are relative to the document's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestManifest {
    pub source: SourceManifest,
    pub trials: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub manifest: SourceManifest,
    pub trials: Vec<Trial>,
}

/// Load and validate every trial listed by the ingest documents.
pub fn ingest(paths: &[PathBuf]) -> Result<Vec<SourceData>> {
    let mut out: Vec<SourceData> = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: IngestManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if let Err(Error::Manifest(m)) = doc.source.validate() {
            return Err(Error::Manifest(format!("{}: {m}", path.display())));
        }
        if out.iter().any(|s| s.manifest.source_id == doc.source.source_id) {
            return Err(Error::Manifest(format!(
                "{}: source_id {} is declared twice",
                path.display(),
                doc.source.source_id
            )));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let trials = doc
            .trials
            .iter()
            .map(|p| {
                let trial = read_trial(&dir.join(p))?;
                if trial.source_id != doc.source.source_id {
                    return Err(Error::Manifest(format!(
                        "{}: trial has source_id {} but the manifest declares {}",
                        p.display(),
                        trial.source_id,
                        doc.source.source_id
                    )));
                }
                validate_trial(trial, &doc.source)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SourceData {
            manifest: doc.source,
            trials,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("no ingest manifests given".into()));
    }
    Ok(out)
}

/// Write sources as trial records plus one ingest document per source.
/// Returns the document paths.
pub fn export(dir: &Path, sources: &[SourceData]) -> Result<Vec<PathBuf>> {
    let mut docs = Vec::new();
    for s in sources {
        let id = s.manifest.source_id;
        let mut trials = Vec::new();
        for t in &s.trials {
            let rel = PathBuf::from(format!("source{id}")).join(format!("trial{}", t.trial_uid));
            write_trial(&dir.join(&rel), t)?;
            trials.push(rel.with_extension("json"));
        }
        let doc = IngestManifest {
            source: s.manifest.clone(),
            trials,
        };
        let path = dir.join(format!("source{id}.json"));
        write_json(&path, &doc)?;
        docs.push(path);
    }
    Ok(docs)
}

pub fn synthetic_sources(cfg: &SynthConfig) -> Result<Vec<SourceData>> {
    let corpus = generate(cfg)?;
    let mut by_source: BTreeMap<usize, Vec<Trial>> = BTreeMap::new();
    for t in corpus.trials {
        by_source.entry(t.source_id).or_default().push(t);
    }
    Ok(corpus
        .manifests
        .into_iter()
        .map(|m| SourceData {
            trials: by_source.remove(&m.source_id).unwrap_or_default(),
            manifest: m,
        })
        .collect())
}

pub fn load_sources(data: &DataSource) -> Result<Vec<SourceData>> {
    match data {
        DataSource::Synthetic(cfg) => synthetic_sources(cfg),
        DataSource::Manifests(paths) => ingest(paths),
    }
}

/// Preprocessed, harmonized windows of every source.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub windows: Vec<WindowSample>,
    pub cluster_models: Vec<ClusterModel>,
}

pub fn prepare_sources(sources: Vec<SourceData>, pre: &PreprocessConfig, master_seed: u64) -> Result<Prepared> {
    let mut windows = Vec::new();
    let mut cluster_models = Vec::new();
    for s in sources {
        let seed = derive_seed(master_seed, "harmonize", s.manifest.source_id as u64);
        let h = harmonize_source(s.trials, &s.manifest, seed).map_err(|e| e.at_stage("harmonize"))?;
        cluster_models.extend(h.cluster_model);
        for lt in &h.trials {
            windows.extend(run_pipeline(lt, &s.manifest, pre).map_err(|e| e.at_stage("preprocess"))?);
        }
    }
    Ok(Prepared {
        windows,
        cluster_models,
    })
}

/// Harmonized trials only, for inspection.
pub fn harmonized(sources: Vec<SourceData>, master_seed: u64) -> Result<Vec<LabeledTrial>> {
    let mut out = Vec::new();
    for s in sources {
        let seed = derive_seed(master_seed, "harmonize", s.manifest.source_id as u64);
        out.extend(harmonize_source(s.trials, &s.manifest, seed)?.trials);
    }
    Ok(out)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let sources = load_sources(&cfg.data).map_err(|e| e.at_stage("load"))?;
    prepare_sources(sources, &cfg.preprocess, cfg.seed)
}

/// Tensors of one repetition.
#[derive(Debug, Clone)]
pub struct RunData<F> {
    pub space: LabelSpace,
    pub data: TrainData<F>,
    pub test: TensorSet<F>,
    pub membership: SplitMembership,
}

fn tensors<F: Real>(windows: &[WindowSample], space: &LabelSpace, mode: Mode, rate: f64) -> Result<TensorSet<F>> {
    if mode != Mode::PsdMlp {
        return TensorSet::from_windows(windows, space);
    }
    let width = windows.first().map_or(0, |w| w.data.nrows() * 5);
    let mut x = ndarray::Array2::zeros((windows.len(), width));
    let (mut y, mut d) = (Vec::new(), Vec::new());
    for (mut row, w) in x.outer_iter_mut().zip(windows) {
        for (r, v) in row.iter_mut().zip(psd_features(w.data.view(), rate)?) {
            *r = crate::model::layers::cast(v);
        }
        y.push(space.class_of(w.label)?);
        d.push(space.source_class(w.source_id)?);
    }
    TensorSet::new(x, y, d)
}

/// Balance and split the windows for one repetition.
pub fn run_data<F: Real>(windows: &[WindowSample], cfg: &ExperimentConfig, repetition: usize) -> Result<RunData<F>> {
    let rep = repetition as u64;
    let pool: Vec<WindowSample> = windows
        .iter()
        .filter(|w| !(cfg.mode.binary() && w.label == crate::data::EmotionState::Neutral))
        .cloned()
        .collect();
    let corpus = balance(pool, derive_seed(cfg.seed, "balance", rep)).map_err(|e| e.at_stage("balance"))?;
    let splits = stratified_split(
        &corpus,
        cfg.split_ratios,
        cfg.group_by_trial,
        derive_seed(cfg.seed, "split", rep),
    )
    .map_err(|e| e.at_stage("split"))?;
    let space = LabelSpace::from_windows(cfg.mode.binary(), &corpus.samples);
    let rate = cfg.preprocess.target_rate_hz;
    let build = |ws: &[WindowSample]| tensors::<F>(ws, &space, cfg.mode, rate).map_err(|e| e.at_stage("features"));
    let (mut train, mut val, mut test) = (build(&splits.train)?, build(&splits.val)?, build(&splits.test)?);
    if cfg.mode == Mode::PsdMlp {
        let (mean, std) = column_stats(&train.x);
        for set in [&mut train, &mut val, &mut test] {
            for mut row in set.x.outer_iter_mut() {
                for ((v, &m), &s) in row.iter_mut().zip(&mean).zip(&std) {
                    *v = (*v - m) / s;
                }
            }
        }
    }
    Ok(RunData {
        data: TrainData { train, val },
        test,
        membership: splits.membership(),
        space,
    })
}

/// Per-column mean and standard deviation; constant columns get a unit
/// scale so they map to zero.
fn column_stats<F: Real>(x: &ndarray::Array2<F>) -> (Vec<F>, Vec<F>) {
    let n = x.nrows().max(1) as f64;
    x.columns()
        .into_iter()
        .map(|c| {
            let mean = c.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
            let var = c.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            (
                crate::model::layers::cast::<F>(mean),
                crate::model::layers::cast::<F>(std),
            )
        })
        .unzip()
}

pub fn model_spec(cfg: &ExperimentConfig, space: &LabelSpace) -> ModelSpec {
    match cfg.mode {
        Mode::PsdMlp => mlp_spec(
            cfg.preprocess.common_channels.len() * 5,
            space.num_classes(),
            space.num_sources(),
        ),
        _ => {
            let t = cfg.preprocess.window_len().unwrap_or(256);
            ModelSpec {
                encoder: EncoderSpec::Conv(ConvSpec::deep_conv_net(cfg.preprocess.common_channels.len(), t)),
                num_classes: space.num_classes(),
                num_sources: space.num_sources(),
            }
        }
    }
}

/// One row of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub lambda: f64,
    pub repetition: usize,
    pub train_seed: u64,
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub val_emotion_acc: f64,
    pub val_adversary_acc: f64,
    pub test_emotion_acc: f64,
    pub test_adversary_acc: f64,
    pub test_probe_acc: Option<f64>,
    /// History CSV, relative to the output directory.
    pub history: String,
}

pub fn run_stem(lambda: f64, repetition: usize) -> String {
    format!("lambda{}_rep{repetition}", lambda.to_string().replace('.', "p"))
}

/// Train and test one (λ, repetition) pair.
pub fn run_one<F: Real>(
    cfg: &ExperimentConfig,
    rd: &RunData<F>,
    lambda: f64,
    repetition: usize,
) -> Result<(RunRecord, TrainHistory, crate::model::Network<F>)> {
    let tc = cfg.run_config(lambda, repetition);
    let out = train(model_spec(cfg, &rd.space), &rd.data, &tc).map_err(|e| e.at_stage("train"))?;
    let test = evaluate(&out.network, &rd.test).map_err(|e| e.at_stage("test"))?;
    let probe = if rd.space.num_sources() > 1 {
        let tr = evaluate(&out.network, &rd.data.train).map_err(|e| e.at_stage("test"))?;
        Some(nb_probe(
            tr.latents.view(),
            &rd.data.train.d,
            test.latents.view(),
            &rd.test.d,
        )?)
    } else {
        None
    };
    let fin = out.history.final_record();
    let record = RunRecord {
        lambda,
        repetition,
        train_seed: tc.seed,
        stop_epoch: out.history.stop_epoch,
        best_epoch: out.history.best_epoch,
        val_emotion_acc: fin.val_emotion_acc,
        val_adversary_acc: fin.val_adversary_acc,
        test_emotion_acc: test.emotion_accuracy,
        test_adversary_acc: test.adversary_accuracy,
        test_probe_acc: probe,
        history: format!("runs/{}.csv", run_stem(lambda, repetition)),
    };
    Ok((record, out.history, out.network))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub runs: usize,
    pub test_emotion_acc: Stat,
    pub test_adversary_acc: Stat,
    pub test_probe_acc: Option<Stat>,
    pub stop_epoch: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub lambdas: Vec<LambdaSummary>,
}

/// Per-λ statistics, in the order λ values first appear.
pub fn summarize(runs: &[RunRecord]) -> Summary {
    let mut order: Vec<f64> = Vec::new();
    for r in runs {
        if !order.contains(&r.lambda) {
            order.push(r.lambda);
        }
    }
    let lambdas = order
        .into_iter()
        .map(|l| {
            let rs: Vec<&RunRecord> = runs.iter().filter(|r| r.lambda == l).collect();
            let col = |f: &dyn Fn(&RunRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let probes: Option<Vec<f64>> = rs.iter().map(|r| r.test_probe_acc).collect();
            LambdaSummary {
                lambda: l,
                runs: rs.len(),
                test_emotion_acc: Stat::of(&col(&|r| r.test_emotion_acc)),
                test_adversary_acc: Stat::of(&col(&|r| r.test_adversary_acc)),
                test_probe_acc: probes.map(|p| Stat::of(&p)),
                stop_epoch: Stat::of(&col(&|r| r.stop_epoch as f64)),
            }
        })
        .collect();
    Summary { lambdas }
}

pub fn write_runs_csv(path: &Path, runs: &[RunRecord]) -> Result<()> {
    crate::format::create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in runs {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<RunRecord>, _>>()?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    crate::format::create_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Rebuild `summary.json` and the plots from the CSVs in `dir`.
pub fn analyze(dir: &Path) -> Result<Summary> {
    let runs = read_runs_csv(&dir.join("runs.csv"))?;
    let summary = summarize(&runs);
    write_json(&dir.join("summary.json"), &summary)?;
    let mut histories = Vec::new();
    for r in &runs {
        histories.push((r.lambda, TrainHistory::read_csv(&dir.join(&r.history))?));
    }
    fs::create_dir_all(dir.join("plots")).map_err(|e| Error::io(dir.join("plots"), e))?;
    let chance = runs_chance(dir);
    plot::write_leakage(&dir.join("plots/leakage.svg"), &histories, chance.1)?;
    plot::write_accuracy_bars(&dir.join("plots/accuracy.svg"), &summary, chance)?;
    Ok(summary)
}

/// (emotion chance, source chance), from `labels.json` when present.
fn runs_chance(dir: &Path) -> (Option<f64>, Option<f64>) {
    fs::read_to_string(dir.join("labels.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<LabelSpace>(&t).ok())
        .map_or((None, None), |s| {
            (Some(1.0 / s.num_classes() as f64), Some(1.0 / s.num_sources() as f64))
        })
}

/// Run the whole study and write its result bundle under `output_dir`:
///
/// * `config.json`: the effective configuration;
/// * `cluster_models/source<id>.json`: fitted label clusters;
/// * `labels.json`: class and source index maps;
/// * `splits/rep<r>.json`: split membership per repetition;
/// * `runs/<stem>.csv`: per-epoch history of every run;
/// * `runs.csv`, `summary.json`, `plots/*.svg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

fn run_typed<F: Real>(cfg: &ExperimentConfig) -> Result<Summary> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir.join("runs")).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    let prepared = prepare(cfg)?;
    for m in &prepared.cluster_models {
        write_json(&dir.join(format!("cluster_models/source{}.json", m.source_id)), m)?;
    }
    let mut runs = Vec::new();
    for rep in 0..cfg.repetitions {
        let rd = run_data::<F>(&prepared.windows, cfg, rep)?;
        if rep == 0 {
            write_json(&dir.join("labels.json"), &rd.space)?;
        }
        rd.membership.write_json(&dir.join(format!("splits/rep{rep}.json")))?;
        for &lambda in &cfg.lambda_grid {
            let (record, history, net) = run_one(cfg, &rd, lambda, rep)?;
            log::info!(
                "lambda {lambda} rep {rep}: stop {} test emotion {:.3} adversary {:.3}",
                record.stop_epoch,
                record.test_emotion_acc,
                record.test_adversary_acc
            );
            history.write_csv(&dir.join(&record.history))?;
            if cfg.save_checkpoints {
                net.save(&dir.join(format!("checkpoints/{}.json", run_stem(lambda, rep))))?;
            }
            runs.push(record);
        }
    }
    write_runs_csv(&dir.join("runs.csv"), &runs)?;
    analyze(dir)
}

/// Preprocess the configured data and write windows (and, in PSD mode,
/// feature matrices) plus cluster models to `dir`.
pub fn write_prepared(cfg: &ExperimentConfig, dir: &Path) -> Result<Prepared> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    write_windows(&dir.join("windows"), &prepared.windows, cfg.preprocess.target_rate_hz)?;
    if cfg.mode == Mode::PsdMlp {
        let names: Vec<&str> = cfg.preprocess.common_channels.iter().map(String::as_str).collect();
        let fm = crate::psd::feature_matrix(&prepared.windows, &names, cfg.preprocess.target_rate_hz)?;
        crate::format::write_features(&dir.join("features"), &fm)?;
    }
    for m in &prepared.cluster_models {
        write_json(&dir.join(format!("cluster_models/source{}.json", m.source_id)), m)?;
    }
    Ok(prepared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmotionState;

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            n_sources: 2,
            subjects_per_source: 1,
            trials_per_subject: 3,
            trial_seconds: 13.0,
            sampling_rate_hz: vec![200.0, 128.0],
            channel_count: vec![32, 14],
            ..SynthConfig::default()
        }
    }

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synthetic(tiny_synth()),
            lambda_grid: vec![0.0],
            repetitions: 1,
            output_dir: dir.to_path_buf(),
            trainer: TrainConfig {
                max_epochs: 2,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    fn record(lambda: f64, rep: usize, e: f64, a: f64) -> RunRecord {
        RunRecord {
            lambda,
            repetition: rep,
            train_seed: 1,
            stop_epoch: 10 + rep,
            best_epoch: 5,
            val_emotion_acc: e,
            val_adversary_acc: a,
            test_emotion_acc: e,
            test_adversary_acc: a,
            test_probe_acc: Some(a),
            history: run_stem(lambda, rep),
        }
    }

    #[test]
    fn empty_document_is_the_default_config() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.repetitions, 5);
        cfg.validate().unwrap();
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"mode": "psd_mlp"}"#).unwrap();
        assert_eq!(cfg.mode, Mode::PsdMlp);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"modes": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let bad = [
            ExperimentConfig {
                repetitions: 0,
                ..Default::default()
            },
            ExperimentConfig {
                lambda_grid: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                lambda_grid: vec![0.1, -1.0],
                ..Default::default()
            },
            ExperimentConfig {
                lambda_grid: vec![0.1, 0.1],
                ..Default::default()
            },
            ExperimentConfig {
                trainer: TrainConfig {
                    max_epochs: 0,
                    ..Default::default()
                },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().unwrap_err().is_config());
        }
    }

    #[test]
    fn run_seeds_ignore_lambda() {
        let cfg = ExperimentConfig::default();
        let a = cfg.run_config(0.0, 2);
        let b = cfg.run_config(0.5, 2);
        assert_eq!(a.seed, b.seed);
        assert_eq!(b.lambda, 0.5);
        assert_ne!(a.seed, cfg.run_config(0.0, 3).seed);
        assert_eq!(a.seed, derive_seed(0, "train", 2));
    }

    #[test]
    fn stems_have_no_dots() {
        assert_eq!(run_stem(0.05, 3), "lambda0p05_rep3");
        assert_eq!(run_stem(0.0, 0), "lambda0_rep0");
    }

    #[test]
    fn stat_matches_hand_computation() {
        let s = Stat::of(&[0.2, 0.4, 0.9]);
        assert!((s.mean - 0.5).abs() < 1e-15);
        // Deviations -0.3, -0.1, 0.4: squares sum to 0.26, over n - 1 = 2.
        assert!((s.std - 0.13f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[0.7]).std, 0.0);
    }

    #[test]
    fn summary_groups_by_lambda_in_grid_order() {
        let runs = vec![
            record(0.0, 0, 0.6, 0.8),
            record(0.1, 0, 0.5, 0.3),
            record(0.0, 1, 0.8, 0.6),
            record(0.1, 1, 0.7, 0.2),
        ];
        let s = summarize(&runs);
        assert_eq!(s.lambdas.len(), 2);
        assert_eq!(s.lambdas[0].lambda, 0.0);
        assert_eq!(s.lambdas[0].runs, 2);
        assert!((s.lambdas[0].test_emotion_acc.mean - 0.7).abs() < 1e-12);
        assert!((s.lambdas[1].test_adversary_acc.mean - 0.25).abs() < 1e-12);
        assert_eq!(s.lambdas[1].stop_epoch.mean, 10.5);
    }

    #[test]
    fn runs_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut runs = vec![
            record(0.0, 0, 1.0 / 3.0, 0.123456789012345),
            record(0.01, 1, 0.1 + 0.2, 0.5),
        ];
        runs[1].test_probe_acc = None;
        let p = dir.path().join("runs.csv");
        write_runs_csv(&p, &runs).unwrap();
        let back = read_runs_csv(&p).unwrap();
        assert_eq!(back, runs);
        assert_eq!(summarize(&back), summarize(&runs));
    }

    #[test]
    fn exported_sources_ingest_to_identical_trials() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synthetic_sources(&tiny_synth()).unwrap();
        let docs = export(dir.path(), &sources).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(ingest(&docs).unwrap(), sources);
    }

    #[test]
    fn missing_trial_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synthetic_sources(&tiny_synth()).unwrap();
        let docs = export(dir.path(), &sources).unwrap();
        let gone = dir.path().join("source0/trial0.bin");
        fs::remove_file(&gone).unwrap();
        let err = ingest(&docs).unwrap_err().to_string();
        assert!(err.contains("trial0.bin"), "{err}");
    }

    #[test]
    fn non_positive_rate_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut sources = synthetic_sources(&tiny_synth()).unwrap();
        sources[1].manifest.sampling_rate_hz = 0.0;
        let docs = export(dir.path(), &sources).unwrap();
        let err = ingest(&docs).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
        assert!(err.is_config());
        assert!(err.to_string().contains("sampling_rate_hz"));
    }

    #[test]
    fn duplicate_source_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synthetic_sources(&tiny_synth()).unwrap();
        let docs = export(dir.path(), &sources).unwrap();
        assert!(ingest(&[docs[0].clone(), docs[0].clone()]).is_err());
    }

    #[test]
    fn binary_mode_drops_neutral_and_psd_mode_gives_70_features() {
        let cfg = ExperimentConfig {
            mode: Mode::TimeseriesBinary,
            ..tiny_config(Path::new("unused"))
        };
        let prepared = prepare(&cfg).unwrap();
        assert!(prepared.windows.iter().any(|w| w.label == EmotionState::Neutral));
        let rd = run_data::<f32>(&prepared.windows, &cfg, 0).unwrap();
        assert_eq!(rd.space.num_classes(), 2);
        assert!(rd.data.train.y.iter().all(|&y| y < 2));
        let n = rd.data.train.len() + rd.data.val.len() + rd.test.len();
        let neutral = prepared
            .windows
            .iter()
            .filter(|w| w.label == EmotionState::Neutral)
            .count();
        assert_eq!(n, prepared.windows.len() - neutral);

        let cfg = ExperimentConfig {
            mode: Mode::PsdMlp,
            ..cfg
        };
        let rd = run_data::<f64>(&prepared.windows, &cfg, 0).unwrap();
        assert_eq!(rd.data.train.x.ncols(), 70);
    }

    #[test]
    fn downstream_failures_name_their_stage() {
        let mut synth = tiny_synth();
        synth.trial_seconds = 6.0;
        let cfg = ExperimentConfig {
            data: DataSource::Synthetic(synth),
            ..tiny_config(Path::new("unused"))
        };
        let prepared = prepare(&cfg).unwrap();
        let err = run_data::<f32>(&prepared.windows, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }), "{err}");
    }

    #[test]
    fn tiny_study_writes_its_bundle_and_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = run_experiment(&tiny_config(a.path())).unwrap();
        let sb = run_experiment(&tiny_config(b.path())).unwrap();
        assert_eq!(sa, sb);
        for rel in [
            "runs.csv",
            "summary.json",
            "runs/lambda0_rep0.csv",
            "splits/rep0.json",
            "plots/leakage.svg",
            "plots/accuracy.svg",
            "labels.json",
        ] {
            assert!(a.path().join(rel).exists(), "{rel}");
        }
        let ja = fs::read(a.path().join("summary.json")).unwrap();
        assert_eq!(ja, fs::read(b.path().join("summary.json")).unwrap());
        // Analysis alone reproduces the summary from the CSVs.
        fs::remove_file(a.path().join("summary.json")).unwrap();
        assert_eq!(analyze(a.path()).unwrap(), sa);
        assert_eq!(fs::read(a.path().join("summary.json")).unwrap(), ja);
    }
}
