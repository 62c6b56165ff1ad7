//! Alternating adversarial training, early stopping, and leakage probes.
//!
//! Each batch runs one train-mode encoder pass. The adversary head takes a
//! step on the detached latents first; the encoder and emotion head then
//! take a step on `CE(y) - λ·CE(d)` with the updated adversary held fixed.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{EmotionState, WindowSample};
use crate::error::{Error, Result};
use crate::model::layers::{cast, dense_backward, softmax_ce};
use crate::model::{EncoderCache, ModelSpec, Network, Real};
use crate::seed::{derive_seed, derived_rng, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Drop neutral windows and classify negative vs positive.
    pub binary_mode: bool,
    /// Train and log the adversary. When off, training is a plain
    /// encoder + classifier run and `lambda` must be 0.
    pub train_adversary: bool,
    pub optimizer: OptimizerKind,
    /// Before each epoch's evaluation, reset batch-norm running estimates
    /// from a dropout-free pass over the training set.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.0,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 500,
            early_stop_patience: 10,
            seed: 0,
            binary_mode: false,
            train_adversary: true,
            optimizer: OptimizerKind::Sgd,
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and ≥ 0, got {}", self.lambda));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and ≥ 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return bad("batch_size, max_epochs and early_stop_patience must be ≥ 1".into());
        }
        if !self.train_adversary && self.lambda != 0.0 {
            return bad("lambda > 0 needs train_adversary".into());
        }
        Ok(())
    }
}

/// Mapping from emotion states and source ids to class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub binary: bool,
    /// Source ids in adversary class order.
    pub sources: Vec<usize>,
}

impl LabelSpace {
    pub fn new(binary: bool, sources: impl IntoIterator<Item = usize>) -> Self {
        let sources: BTreeSet<usize> = sources.into_iter().collect();
        LabelSpace {
            binary,
            sources: sources.into_iter().collect(),
        }
    }

    pub fn from_windows(binary: bool, windows: &[WindowSample]) -> Self {
        Self::new(binary, windows.iter().map(|w| w.source_id))
    }

    pub fn num_classes(&self) -> usize {
        if self.binary {
            2
        } else {
            3
        }
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn class_of(&self, s: EmotionState) -> Result<usize> {
        match (self.binary, s) {
            (false, s) => Ok(s.index()),
            (true, EmotionState::Negative) => Ok(0),
            (true, EmotionState::Positive) => Ok(1),
            (true, EmotionState::Neutral) => Err(Error::Config("neutral window in binary mode".into())),
        }
    }

    pub fn source_class(&self, source_id: usize) -> Result<usize> {
        self.sources
            .binary_search(&source_id)
            .map_err(|_| Error::Config(format!("source {source_id} is not in the label space")))
    }
}

/// Flattened inputs with emotion and source class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet<F> {
    pub x: Array2<F>,
    pub y: Vec<usize>,
    pub d: Vec<usize>,
}

impl<F: Real> TensorSet<F> {
    pub fn new(x: Array2<F>, y: Vec<usize>, d: Vec<usize>) -> Result<Self> {
        if x.nrows() != y.len() || y.len() != d.len() {
            return Err(Error::Shape(format!(
                "{} rows, {} labels, {} sources",
                x.nrows(),
                y.len(),
                d.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite input value".into()));
        }
        Ok(TensorSet { x, y, d })
    }

    /// One row per window, channel-major.
    pub fn from_windows(windows: &[WindowSample], space: &LabelSpace) -> Result<Self> {
        let width = windows.first().map_or(0, |w| w.data.len());
        let mut x = Array2::zeros((windows.len(), width));
        let mut y = Vec::with_capacity(windows.len());
        let mut d = Vec::with_capacity(windows.len());
        for (mut row, w) in x.outer_iter_mut().zip(windows) {
            if w.data.len() != width {
                return Err(Error::Shape("windows differ in shape".into()));
            }
            for (r, v) in row.iter_mut().zip(w.data.iter()) {
                *r = cast(*v as f64);
            }
            y.push(space.class_of(w.label)?);
            d.push(space.source_class(w.source_id)?);
        }
        Self::new(x, y, d)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> (Array2<F>, Vec<usize>, Vec<usize>) {
        (
            self.x.select(Axis(0), idx),
            idx.iter().map(|&i| self.y[i]).collect(),
            idx.iter().map(|&i| self.d[i]).collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainData<F> {
    pub train: TensorSet<F>,
    pub val: TensorSet<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Classifier,
    Adversary,
}

#[derive(Debug, Clone, Default)]
struct Moments<F> {
    t: i32,
    m: Vec<F>,
    v: Vec<F>,
}

/// Per-group optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    kind: OptimizerKind,
    lr: f64,
    state: [Moments<F>; 3],
}

impl<F: Real> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            state: Default::default(),
        }
    }

    pub fn update(&mut self, group: Group, params: &mut [F], grad: &[F]) {
        debug_assert_eq!(params.len(), grad.len());
        let lr: F = cast(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                let st = &mut self.state[group as usize];
                if st.m.len() != params.len() {
                    st.m = vec![F::zero(); params.len()];
                    st.v = vec![F::zero(); params.len()];
                }
                st.t += 1;
                let c1: F = cast(1.0 - f64::powi(b1, st.t));
                let c2: F = cast(1.0 - f64::powi(b2, st.t));
                let (b1, b2, eps): (F, F, F) = (cast(b1), cast(b2), cast(eps));
                for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

fn finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged(format!("{what} is {loss}")))
    }
}

fn head_weight_len<F: Real>(net: &Network<F>, out: usize) -> usize {
    out * net.latent_dim()
}

/// One descent step for the adversary head on detached latents `h`.
/// Returns its cross-entropy before the step.
pub fn adversary_step<F: Real>(
    net: &mut Network<F>,
    opt: &mut Optimizer<F>,
    h: ArrayView2<F>,
    d: &[usize],
) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let ce = softmax_ce(&net.adversary_logits(h)?, d);
    finite(ce.loss, "adversary loss")?;
    let w = head_weight_len(net, net.spec().num_sources);
    let (dw, db, _) = dense_backward(h, &ce.dlogits, &net.adversary[..w], false);
    opt.update(Group::Adversary, &mut net.adversary, &[dw, db].concat());
    Ok(ce.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    /// Mean emotion cross-entropy.
    pub classifier: f64,
    /// Mean `λ·log q_adv(d|h)`, i.e. `-λ·CE(d)`.
    pub adversarial_term: f64,
    /// Mean adversary cross-entropy under the frozen adversary, if trained.
    pub adversary: Option<f64>,
}

/// Value and parameter gradients of `CE(y) - λ·CE(d)` for the encoder and
/// emotion head, given a train-mode pass.
pub fn objective_gradients<F: Real>(
    net: &Network<F>,
    h: &Array2<F>,
    cache: &EncoderCache<F>,
    y: &[usize],
    d: &[usize],
    lambda: f64,
    with_adversary: bool,
) -> Result<(StepLosses, Vec<F>, Vec<F>)> {
    if y.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let clf = softmax_ce(&net.emotion_logits(h.view())?, y);
    finite(clf.loss, "classifier loss")?;
    let wc = head_weight_len(net, net.spec().num_classes);
    let (dwc, dbc, dh) = dense_backward(h.view(), &clf.dlogits, &net.classifier[..wc], true);
    let mut dh = dh.expect("requested");
    let mut losses = StepLosses {
        classifier: clf.loss,
        adversarial_term: 0.0,
        adversary: None,
    };
    if with_adversary {
        let adv = softmax_ce(&net.adversary_logits(h.view())?, d);
        finite(adv.loss, "adversary loss")?;
        losses.adversary = Some(adv.loss);
        losses.adversarial_term = -lambda * adv.loss;
        // Skipped entirely at λ = 0 so the step is exactly a plain one.
        if lambda != 0.0 {
            let wa = head_weight_len(net, net.spec().num_sources);
            let (_, _, dha) = dense_backward(h.view(), &adv.dlogits, &net.adversary[..wa], true);
            dh.scaled_add(cast::<F>(-lambda), &dha.expect("requested"));
        }
    }
    let g_enc = net.encoder_backward(cache, &dh);
    Ok((losses, g_enc, [dwc, dbc].concat()))
}

/// One descent step for the encoder and emotion head with the adversary
/// held fixed.
#[allow(clippy::too_many_arguments)]
pub fn encoder_classifier_step<F: Real>(
    net: &mut Network<F>,
    opt: &mut Optimizer<F>,
    h: &Array2<F>,
    cache: &EncoderCache<F>,
    y: &[usize],
    d: &[usize],
    lambda: f64,
    with_adversary: bool,
) -> Result<StepLosses> {
    let (losses, g_enc, g_clf) = objective_gradients(net, h, cache, y, d, lambda, with_adversary)?;
    opt.update(Group::Encoder, &mut net.encoder, &g_enc);
    opt.update(Group::Classifier, &mut net.classifier, &g_clf);
    Ok(losses)
}

/// Value of `CE(y) - λ·CE(d)` on a train-mode pass whose dropout masks come
/// from `dropout_seed`.
pub fn objective<F: Real>(
    net: &Network<F>,
    x: ArrayView2<F>,
    y: &[usize],
    d: &[usize],
    lambda: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let (h, _) = net.forward_train(x, &mut rng_from(dropout_seed))?;
    let clf = softmax_ce(&net.emotion_logits(h.view())?, y).loss;
    let adv = softmax_ce(&net.adversary_logits(h.view())?, d).loss;
    Ok(clf - lambda * adv)
}

/// Gaussian naive Bayes with uniform class priors and per-feature variances
/// floored at `1e-9`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNb {
    pub classes: Vec<usize>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
}

pub const NB_VARIANCE_FLOOR: f64 = 1e-9;

impl GaussianNb {
    pub fn fit(x: ArrayView2<f64>, y: &[usize]) -> Result<Self> {
        let classes: Vec<usize> = y.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if classes.len() < 2 || x.nrows() != y.len() {
            return Err(Error::Shape(format!(
                "naive Bayes needs ≥ 2 classes and one label per row ({} classes, {} rows, {} labels)",
                classes.len(),
                x.nrows(),
                y.len()
            )));
        }
        let f = x.ncols();
        let mut means = Array2::zeros((classes.len(), f));
        let mut variances = Array2::zeros((classes.len(), f));
        for (k, &c) in classes.iter().enumerate() {
            let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
            let rows = x.select(Axis(0), &idx);
            let mean = rows.mean_axis(Axis(0)).expect("non-empty class");
            let var = rows.var_axis(Axis(0), 0.0).mapv(|v| v.max(NB_VARIANCE_FLOOR));
            means.row_mut(k).assign(&mean);
            variances.row_mut(k).assign(&var);
        }
        Ok(GaussianNb {
            classes,
            means,
            variances,
        })
    }

    /// `log p(c) + Σ_j log N(x_j | μ_cj, σ²_cj)` for every class.
    pub fn joint_log_likelihood(&self, x: &[f64]) -> Vec<f64> {
        let prior = -(self.classes.len() as f64).ln();
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.means
            .outer_iter()
            .zip(self.variances.outer_iter())
            .map(|(mu, var)| {
                let mut s = prior;
                for ((&xi, &m), &v) in x.iter().zip(mu.iter()).zip(var.iter()) {
                    s -= 0.5 * (ln_2pi + v.ln()) + (xi - m) * (xi - m) / (2.0 * v);
                }
                s
            })
            .collect()
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        x.outer_iter()
            .map(|row| {
                let jll = self.joint_log_likelihood(&row.to_vec());
                let mut best = 0;
                for (i, &v) in jll.iter().enumerate() {
                    if v > jll[best] {
                        best = i;
                    }
                }
                self.classes[best]
            })
            .collect()
    }
}

/// Accuracy on `val` of a naive Bayes source classifier fit on `train`.
pub fn nb_probe<F: Real>(train: ArrayView2<F>, train_d: &[usize], val: ArrayView2<F>, val_d: &[usize]) -> Result<f64> {
    let to64 = |a: ArrayView2<F>| a.mapv(|v| v.to_f64().unwrap_or(f64::NAN));
    let model = GaussianNb::fit(to64(train).view(), train_d)?;
    if val_d.is_empty() || val.nrows() != val_d.len() {
        return Err(Error::Shape("naive Bayes probe needs labelled validation rows".into()));
    }
    let pred = model.predict(to64(val).view());
    Ok(pred.iter().zip(val_d).filter(|(a, b)| a == b).count() as f64 / val_d.len() as f64)
}

/// Eval-mode metrics over a whole set.
#[derive(Debug, Clone)]
pub struct Evaluation<F> {
    pub classifier_loss: f64,
    pub adversary_loss: f64,
    pub emotion_accuracy: f64,
    pub adversary_accuracy: f64,
    pub latents: Array2<F>,
}

const EVAL_CHUNK: usize = 256;

pub fn evaluate<F: Real>(net: &Network<F>, set: &TensorSet<F>) -> Result<Evaluation<F>> {
    if set.is_empty() {
        return Err(Error::Shape("cannot evaluate an empty set".into()));
    }
    let n = set.len();
    let mut latents = Array2::zeros((n, net.latent_dim()));
    let (mut cl, mut al, mut ec, mut ac) = (0.0, 0.0, 0, 0);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let h = net.encode(set.x.slice(s![start..end, ..]))?;
        let clf = softmax_ce(&net.emotion_logits(h.view())?, &set.y[start..end]);
        let adv = softmax_ce(&net.adversary_logits(h.view())?, &set.d[start..end]);
        let m = (end - start) as f64;
        cl += clf.loss * m;
        al += adv.loss * m;
        ec += clf.correct;
        ac += adv.correct;
        latents.slice_mut(s![start..end, ..]).assign(&h);
    }
    Ok(Evaluation {
        classifier_loss: cl / n as f64,
        adversary_loss: al / n as f64,
        emotion_accuracy: ec as f64 / n as f64,
        adversary_accuracy: ac as f64 / n as f64,
        latents,
    })
}

/// One row of the training history CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean emotion cross-entropy over the epoch's batches.
    pub train_classifier_loss: f64,
    /// Mean `λ·log q_adv(d|h)` over the epoch's batches.
    pub train_adversarial_term: f64,
    /// Mean adversary cross-entropy over the epoch's adversary steps.
    pub train_adversary_loss: Option<f64>,
    pub train_emotion_acc: f64,
    pub train_adversary_acc: f64,
    pub val_classifier_loss: f64,
    pub val_adversary_loss: f64,
    pub val_emotion_acc: f64,
    pub val_adversary_acc: f64,
    /// Naive Bayes source probe on validation latents; empty with a single
    /// source.
    pub val_probe_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Number of completed epochs.
    pub stop_epoch: usize,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Metrics of the restored parameters.
    pub fn final_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::format::create_parent(path)?;
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::format::create_parent(path)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome<F: Real> {
    pub network: Network<F>,
    pub history: TrainHistory,
}

fn check_data<F: Real>(spec: &ModelSpec, data: &TrainData<F>) -> Result<()> {
    for (name, set) in [("train", &data.train), ("validation", &data.val)] {
        if set.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
        if set.y.iter().any(|&y| y >= spec.num_classes) || set.d.iter().any(|&d| d >= spec.num_sources) {
            return Err(Error::Config(format!("{name} labels exceed the model's class counts")));
        }
    }
    Ok(())
}

/// Initialize from `spec` under the run seed and train.
pub fn train<F: Real>(spec: ModelSpec, data: &TrainData<F>, cfg: &TrainConfig) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    check_data(&spec, data)?;
    let net = Network::init(spec, derive_seed(cfg.seed, "model", 0))?;
    train_from(net, data, cfg)
}

/// Train an existing network. Batches are reshuffled every epoch and the
/// last short batch is kept. Stops after `early_stop_patience` epochs
/// without a lower validation classifier loss and restores the best epoch.
pub fn train_from<F: Real>(mut net: Network<F>, data: &TrainData<F>, cfg: &TrainConfig) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    check_data(net.spec(), data)?;
    let mut shuffle_rng = derived_rng(cfg.seed, "shuffle", 0);
    let mut dropout_rng = derived_rng(cfg.seed, "dropout", 0);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let probe_possible = data.train.d.iter().collect::<BTreeSet<_>>().len() >= 2;
    let n = data.train.len();
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Network<F>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut clf_sum, mut term_sum, mut adv_sum) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y, d) = data.train.select(chunk);
            let (h, cache) = net.forward_train(x.view(), &mut dropout_rng)?;
            net.commit_batch_stats(&cache);
            let w = chunk.len() as f64;
            if cfg.train_adversary {
                adv_sum += w * adversary_step(&mut net, &mut opt, h.view(), &d)
                    .map_err(|e| Error::Diverged(format!("epoch {epoch}, batch {b}: {e}")))?;
            }
            let l = encoder_classifier_step(&mut net, &mut opt, &h, &cache, &y, &d, cfg.lambda, cfg.train_adversary)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}, batch {b}: {e}")))?;
            clf_sum += w * l.classifier;
            term_sum += w * l.adversarial_term;
        }
        if cfg.recalibrate_bn {
            net.recalibrate_batch_stats(data.train.x.view(), cfg.batch_size)?;
        }
        let tr = evaluate(&net, &data.train)?;
        let va = evaluate(&net, &data.val)?;
        let probe = if probe_possible {
            Some(nb_probe(
                tr.latents.view(),
                &data.train.d,
                va.latents.view(),
                &data.val.d,
            )?)
        } else {
            None
        };
        if !va.classifier_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "validation loss is {} at epoch {epoch}",
                va.classifier_loss
            )));
        }
        let record = EpochRecord {
            epoch,
            train_classifier_loss: clf_sum / n as f64,
            train_adversarial_term: term_sum / n as f64,
            train_adversary_loss: cfg.train_adversary.then_some(adv_sum / n as f64),
            train_emotion_acc: tr.emotion_accuracy,
            train_adversary_acc: tr.adversary_accuracy,
            val_classifier_loss: va.classifier_loss,
            val_adversary_loss: va.adversary_loss,
            val_emotion_acc: va.emotion_accuracy,
            val_adversary_acc: va.adversary_accuracy,
            val_probe_acc: probe,
        };
        log::debug!("{record:?}");
        records.push(record);
        if best.as_ref().is_none_or(|(loss, _, _)| va.classifier_loss < *loss) {
            best = Some((va.classifier_loss, epoch, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_net) = best.expect("at least one epoch");
    let stop_epoch = records.len();
    Ok(TrainOutcome {
        network: best_net,
        history: TrainHistory {
            records,
            stop_epoch,
            best_epoch,
            stopped_early: stop_epoch < cfg.max_epochs,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvSpec, DenseSpec, EncoderSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn dense_net(input: usize, hidden: usize, classes: usize, sources: usize, seed: u64) -> Network<f64> {
        Network::init(
            ModelSpec {
                encoder: EncoderSpec::Dense(DenseSpec {
                    input_dim: input,
                    hidden,
                    dropout: 0.0,
                }),
                num_classes: classes,
                num_sources: sources,
            },
            seed,
        )
        .unwrap()
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn zero_learning_rate_leaves_adversary_unchanged() {
        let mut net = dense_net(4, 3, 3, 2, 0);
        let before = net.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0);
        let h = gaussian(5, 3, 1);
        let loss = adversary_step(&mut net, &mut opt, h.view(), &[0, 1, 0, 1, 1]).unwrap();
        assert!(loss > 0.0);
        assert_eq!(net.adversary, before.adversary);
    }

    #[test]
    fn adversary_learns_separable_toy() {
        let mut net = dense_net(4, 2, 3, 2, 3);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5);
        let mut rng = rng_from(7);
        let d: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let h = Array2::from_shape_fn((64, 2), |(i, j)| {
            let sign = if d[i] == 0 { -1.0 } else { 1.0 };
            if j == 0 {
                sign * 2.0 + rng.gen_range(-0.5..0.5)
            } else {
                rng.gen_range(-1.0..1.0)
            }
        });
        let mut acc = 0.0;
        for _ in 0..200 {
            adversary_step(&mut net, &mut opt, h.view(), &d).unwrap();
            let ce = softmax_ce(&net.adversary_logits(h.view()).unwrap(), &d);
            acc = ce.correct as f64 / 64.0;
        }
        assert_eq!(acc, 1.0);
    }

    fn conv_case() -> (Network<f64>, Array2<f64>, Vec<usize>, Vec<usize>) {
        let spec = ModelSpec {
            encoder: EncoderSpec::Conv(ConvSpec::truncated(4, 32)),
            num_classes: 3,
            num_sources: 2,
        };
        let net = Network::init(spec, 9).unwrap();
        (net, gaussian(6, 128, 2), vec![0, 1, 2, 0, 1, 2], vec![0, 0, 0, 1, 1, 1])
    }

    #[test]
    fn steps_respect_freeze_contracts() {
        let (mut net, x, y, d) = conv_case();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let (h, cache) = net.forward_train(x.view(), &mut rng_from(0)).unwrap();
        let before = net.clone();
        adversary_step(&mut net, &mut opt, h.view(), &d).unwrap();
        assert_eq!(net.encoder, before.encoder);
        assert_eq!(net.classifier, before.classifier);
        assert_ne!(net.adversary, before.adversary);

        let mid = net.clone();
        encoder_classifier_step(&mut net, &mut opt, &h, &cache, &y, &d, 1.0, true).unwrap();
        assert_eq!(net.adversary, mid.adversary);
        assert_ne!(net.encoder, mid.encoder);
        assert_ne!(net.classifier, mid.classifier);
    }

    #[test]
    fn lambda_zero_step_equals_plain_step() {
        let (net, x, y, d) = conv_case();
        let (h, cache) = net.forward_train(x.view(), &mut rng_from(0)).unwrap();
        let mut a = net.clone();
        let mut b = net.clone();
        let mut oa = Optimizer::new(OptimizerKind::Sgd, 0.05);
        let mut ob = oa.clone();
        encoder_classifier_step(&mut a, &mut oa, &h, &cache, &y, &d, 0.0, true).unwrap();
        encoder_classifier_step(&mut b, &mut ob, &h, &cache, &y, &d, 0.0, false).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.classifier, b.classifier);
    }

    #[test]
    fn adversarial_gradient_is_reversed_adversary_gradient() {
        let (net, x, y, d) = conv_case();
        let (h, cache) = net.forward_train(x.view(), &mut rng_from(0)).unwrap();
        let (_, g0, _) = objective_gradients(&net, &h, &cache, &y, &d, 0.0, true).unwrap();
        let (_, g1, _) = objective_gradients(&net, &h, &cache, &y, &d, 0.5, true).unwrap();
        // The adversary's own encoder gradient, computed directly.
        let adv = softmax_ce(&net.adversary_logits(h.view()).unwrap(), &d);
        let wa = net.spec().num_sources * net.latent_dim();
        let (_, _, dha) = dense_backward(h.view(), &adv.dlogits, &net.adversary[..wa], true);
        let ga = net.encoder_backward(&cache, &dha.unwrap());
        for i in 0..g0.len() {
            let expect = g0[i] - 0.5 * ga[i];
            assert!((g1[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "{i}");
        }
    }

    #[test]
    fn combined_objective_matches_central_differences() {
        let (net, x, y, d) = conv_case();
        let x = x.slice(s![..1, ..]).to_owned();
        let (y, d) = (&y[..1], &d[..1]);
        let (h, cache) = net.forward_train(x.view(), &mut rng_from(4)).unwrap();
        let (_, g, _) = objective_gradients(&net, &h, &cache, y, d, 1.0, true).unwrap();
        let mut rng = rng_from(12);
        for _ in 0..20 {
            let i = rng.gen_range(0..net.encoder.len());
            let f = |delta: f64| {
                let mut m = net.clone();
                m.encoder[i] += delta;
                objective(&m, x.view(), y, d, 1.0, 4).unwrap()
            };
            let eps = 1e-5;
            let numeric = (f(eps) - f(-eps)) / (2.0 * eps);
            let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "coordinate {i}: {} vs {numeric}", g[i]);
        }
    }

    /// Log of the Gaussian density evaluated directly, then summed.
    fn oracle_jll(x: &Array2<f64>, y: &[usize], row: &[f64]) -> Vec<f64> {
        let classes: BTreeSet<usize> = y.iter().copied().collect();
        classes
            .iter()
            .map(|&c| {
                let members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
                let mut total = (1.0 / classes.len() as f64).ln();
                for (j, &xj) in row.iter().enumerate() {
                    let vals: Vec<f64> = members.iter().map(|&i| x[[i, j]]).collect();
                    let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64).max(1e-9);
                    let density = (-(xj - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
                    total += density.ln();
                }
                total
            })
            .collect()
    }

    #[test]
    fn naive_bayes_matches_closed_form_oracle() {
        let x = gaussian(20, 3, 5);
        let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let nb = GaussianNb::fit(x.view(), &y).unwrap();
        for row in x.outer_iter() {
            let got = nb.joint_log_likelihood(&row.to_vec());
            let want = oracle_jll(&x, &y, &row.to_vec());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn probe_detects_planted_gap() {
        let mut rng = rng_from(3);
        let mut make = |n: usize| {
            let d: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let x = Array2::from_shape_fn((n, 4), |(i, j)| {
                let noise: f64 = rng.sample(StandardNormal);
                if j == 0 {
                    noise + if d[i] == 0 { 3.0 } else { -3.0 }
                } else {
                    noise
                }
            });
            (x, d)
        };
        let (xt, dt) = make(400);
        let (xv, dv) = make(400);
        assert!(nb_probe(xt.view(), &dt, xv.view(), &dv).unwrap() >= 0.99);

        let dt: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let acc = nb_probe(gaussian(400, 4, 10).view(), &dt, gaussian(400, 4, 11).view(), &dt).unwrap();
        assert!((acc - 0.5).abs() <= 0.08, "{acc}");
    }

    #[test]
    fn probe_rejects_single_class() {
        let x = gaussian(10, 2, 0);
        assert!(nb_probe(x.view(), &[0; 10], x.view(), &[0; 10]).is_err());
    }

    fn toy_data(seed: u64, n: usize) -> TensorSet<f64> {
        let mut rng = rng_from(seed);
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let d: Vec<usize> = (0..n).map(|i| (i / 3) % 2).collect();
        let x = Array2::from_shape_fn((n, 6), |(i, j)| {
            let noise: f64 = rng.sample(StandardNormal);
            noise + if j == y[i] { 2.0 } else { 0.0 } + if j == 5 { 2.0 * d[i] as f64 } else { 0.0 }
        });
        TensorSet::new(x, y, d).unwrap()
    }

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            encoder: EncoderSpec::Dense(DenseSpec {
                input_dim: 6,
                hidden: 8,
                dropout: 0.5,
            }),
            num_classes: 3,
            num_sources: 2,
        }
    }

    #[test]
    fn epoch_count_contract() {
        let data = TrainData {
            train: toy_data(1, 60),
            val: toy_data(2, 30),
        };
        let cfg = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        assert!(train(toy_spec(), &data, &cfg).is_err());
        let cfg = TrainConfig {
            max_epochs: 1,
            ..Default::default()
        };
        let out = train(toy_spec(), &data, &cfg).unwrap();
        assert_eq!(out.history.records.len(), 1);
        assert_eq!(out.history.stop_epoch, 1);
        assert!(out.history.records[0].val_probe_acc.is_some());
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let data = TrainData {
            train: toy_data(1, 90),
            val: toy_data(2, 45),
        };
        let cfg = TrainConfig {
            learning_rate: 0.5,
            max_epochs: 300,
            early_stop_patience: 3,
            lambda: 0.1,
            ..Default::default()
        };
        let out = train(toy_spec(), &data, &cfg).unwrap();
        let h = &out.history;
        assert!(h.stopped_early);
        assert_eq!(h.stop_epoch, h.best_epoch + 3);
        let best = h.final_record();
        assert!(h
            .records
            .iter()
            .all(|r| r.val_classifier_loss >= best.val_classifier_loss));
        let again = evaluate(&out.network, &data.val).unwrap();
        assert_eq!(again.classifier_loss, best.val_classifier_loss);
    }

    #[test]
    fn lambda_zero_training_equals_plain_training() {
        let data = TrainData {
            train: toy_data(1, 70),
            val: toy_data(2, 30),
        };
        let cfg = TrainConfig {
            learning_rate: 0.2,
            max_epochs: 15,
            ..Default::default()
        };
        let adv = train(toy_spec(), &data, &cfg).unwrap();
        let plain = train(
            toy_spec(),
            &data,
            &TrainConfig {
                train_adversary: false,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(adv.network.encoder, plain.network.encoder);
        assert_eq!(adv.network.classifier, plain.network.classifier);
        assert_eq!(adv.history.stop_epoch, plain.history.stop_epoch);
    }

    #[test]
    fn history_csv_round_trip() {
        let data = TrainData {
            train: toy_data(1, 60),
            val: toy_data(2, 30),
        };
        let cfg = TrainConfig {
            max_epochs: 3,
            ..Default::default()
        };
        let out = train(toy_spec(), &data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        out.history.write_csv(&path).unwrap();
        assert_eq!(TrainHistory::read_csv(&path).unwrap(), out.history.records);
    }

    #[test]
    fn binary_label_space() {
        let space = LabelSpace::new(true, [3, 0]);
        assert_eq!(space.sources, vec![0, 3]);
        assert_eq!(space.class_of(EmotionState::Positive).unwrap(), 1);
        assert!(space.class_of(EmotionState::Neutral).is_err());
        assert_eq!(space.source_class(3).unwrap(), 1);
        assert!(space.source_class(2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            lambda: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lambda: 0.1,
            train_adversary: false,
            ..Default::default()
        }
        .validate()
        .is_err());
        let parsed: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, TrainConfig::default());
    }
}
