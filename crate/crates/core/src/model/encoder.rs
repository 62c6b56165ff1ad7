//! Convolutional and dense encoders: parameter layout, forward and backward.

use std::ops::Range;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;

use super::layers::*;
use super::{ConvSpec, DenseSpec, EncoderSpec, Real};
use crate::error::{Error, Result};

#[derive(Debug, Default)]
struct Cursor(usize);

impl Cursor {
    fn take(&mut self, len: usize) -> Range<usize> {
        let r = self.0..self.0 + len;
        self.0 += len;
        r
    }
}

#[derive(Debug, Clone)]
pub(crate) struct StageLayout {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub tin: usize,
    pub tconv: usize,
    /// Weight range; the first stage's weight is built from the factorized
    /// temporal and spatial kernels instead.
    pub w: Option<Range<usize>>,
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
    pub rmean: Range<usize>,
    pub rvar: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayout {
    pub spec: ConvSpec,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub stages: Vec<StageLayout>,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseLayout {
    pub spec: DenseSpec,
    pub w: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) enum EncoderLayout {
    Conv(ConvLayout),
    Dense(DenseLayout),
}

/// Kind of initial value for a parameter range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

impl EncoderLayout {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        match spec {
            EncoderSpec::Conv(s) => {
                let trace = s.time_trace()?;
                let mut p = Cursor::default();
                let mut r = Cursor::default();
                let (f0, c, k0) = (s.temporal_filters, s.input_channels, s.temporal_kernel);
                let w1 = p.take(f0 * k0);
                let b1 = p.take(f0);
                let w2 = p.take(f0 * f0 * c);
                let mut stages = vec![StageLayout {
                    cin: c,
                    cout: f0,
                    k: k0,
                    tin: trace[0],
                    tconv: trace[1],
                    w: None,
                    gamma: p.take(f0),
                    beta: p.take(f0),
                    rmean: r.take(f0),
                    rvar: r.take(f0),
                }];
                let mut cin = f0;
                for (i, b) in s.blocks.iter().enumerate() {
                    let w = p.take(b.filters * cin * b.kernel);
                    stages.push(StageLayout {
                        cin,
                        cout: b.filters,
                        k: b.kernel,
                        tin: trace[3 + 2 * i],
                        tconv: trace[4 + 2 * i],
                        w: Some(w),
                        gamma: p.take(b.filters),
                        beta: p.take(b.filters),
                        rmean: r.take(b.filters),
                        rvar: r.take(b.filters),
                    });
                    cin = b.filters;
                }
                Ok(EncoderLayout::Conv(ConvLayout {
                    spec: s.clone(),
                    w1,
                    b1,
                    w2,
                    stages,
                }))
            }
            EncoderSpec::Dense(s) => {
                s.validate()?;
                let mut p = Cursor::default();
                Ok(EncoderLayout::Dense(DenseLayout {
                    spec: s.clone(),
                    w: p.take(s.hidden * s.input_dim),
                    b: p.take(s.hidden),
                }))
            }
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            EncoderLayout::Conv(l) => l.spec.input_channels * l.spec.input_samples,
            EncoderLayout::Dense(l) => l.spec.input_dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            EncoderLayout::Conv(l) => {
                let last = l.stages.last().expect("at least one stage");
                last.cout * (last.tconv / 2)
            }
            EncoderLayout::Dense(l) => l.spec.hidden,
        }
    }

    /// Parameter ranges with their initial values, in storage order.
    pub fn param_inits(&self) -> Vec<(Range<usize>, Init)> {
        match self {
            EncoderLayout::Conv(l) => {
                let s = &l.spec;
                let mut v = vec![
                    (
                        l.w1.clone(),
                        Init::Uniform {
                            fan_in: s.temporal_kernel,
                        },
                    ),
                    (
                        l.b1.clone(),
                        Init::Uniform {
                            fan_in: s.temporal_kernel,
                        },
                    ),
                    (
                        l.w2.clone(),
                        Init::Uniform {
                            fan_in: s.temporal_filters * s.input_channels,
                        },
                    ),
                ];
                for st in &l.stages {
                    if let Some(w) = &st.w {
                        v.push((w.clone(), Init::Uniform { fan_in: st.cin * st.k }));
                    }
                    v.push((st.gamma.clone(), Init::Ones));
                    v.push((st.beta.clone(), Init::Zeros));
                }
                v
            }
            EncoderLayout::Dense(l) => vec![
                (
                    l.w.clone(),
                    Init::Uniform {
                        fan_in: l.spec.input_dim,
                    },
                ),
                (
                    l.b.clone(),
                    Init::Uniform {
                        fan_in: l.spec.input_dim,
                    },
                ),
            ],
        }
    }

    pub fn param_len(&self) -> usize {
        self.param_inits().last().map_or(0, |(r, _)| r.end)
    }

    /// Running statistics: means start at 0, variances at 1.
    pub fn initial_running<F: Real>(&self) -> Vec<F> {
        let mut out = Vec::new();
        if let EncoderLayout::Conv(l) = self {
            for st in &l.stages {
                out.resize(st.rmean.end, F::zero());
                out.resize(st.rvar.end, F::one());
            }
        }
        out
    }
}

struct StageCache<F> {
    cols: Array2<F>,
    bn: BnCache<F>,
    elu: Array3<F>,
    second: Vec<bool>,
    mask: Option<Vec<F>>,
}

enum CacheKind<F> {
    Conv {
        effective_w: Array2<F>,
        stages: Vec<StageCache<F>>,
    },
    Dense {
        input: Array2<F>,
        elu: Array2<F>,
        mask: Option<Vec<F>>,
    },
}

/// Intermediate values of a train-mode forward pass, needed for backward.
pub struct EncoderCache<F> {
    kind: CacheKind<F>,
    batch: usize,
}

impl<F> EncoderCache<F> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Which input won each max-pool comparison, over all pooling layers.
    /// Two passes with equal patterns lie on the same smooth piece of the
    /// network function.
    pub fn pool_switches(&self) -> Vec<bool> {
        match &self.kind {
            CacheKind::Conv { stages, .. } => stages.iter().flat_map(|s| s.second.iter().copied()).collect(),
            CacheKind::Dense { .. } => Vec::new(),
        }
    }
}

/// First-stage weight `(F0, C·k)` and bias, folding the temporal
/// convolution into the spatial one.
fn effective_first_stage<F: Real>(l: &ConvLayout, p: &[F]) -> (Array2<F>, Vec<F>) {
    let (f0, c, k) = (l.spec.temporal_filters, l.spec.input_channels, l.spec.temporal_kernel);
    let w1 = &p[l.w1.clone()];
    let b1 = &p[l.b1.clone()];
    let w2 = &p[l.w2.clone()];
    let mut w = Array2::zeros((f0, c * k));
    let mut b = vec![F::zero(); f0];
    for g in 0..f0 {
        for f in 0..f0 {
            for ch in 0..c {
                let s = w2[(g * f0 + f) * c + ch];
                for j in 0..k {
                    w[[g, ch * k + j]] += s * w1[f * k + j];
                }
                b[g] += s * b1[f];
            }
        }
    }
    (w, b)
}

fn rows_to_cnt<F: Real>(x: ArrayView2<F>, c: usize, t: usize) -> Array3<F> {
    let n = x.nrows();
    x.into_shape_with_order((n, c, t))
        .expect("validated input width")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
}

fn flatten<F: Real>(a: Array3<F>) -> Array2<F> {
    let (c, n, t) = a.dim();
    a.permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * t))
        .expect("contiguous")
}

pub(crate) fn check_input<F>(layout: &EncoderLayout, x: &ArrayView2<F>) -> Result<()> {
    if x.ncols() != layout.input_len() || x.nrows() == 0 {
        return Err(Error::Shape(format!(
            "encoder expects a non-empty batch of width {}, got {}×{}",
            layout.input_len(),
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Forward pass. With `train = Some(rng)`, batch statistics and dropout are
/// used and a cache is returned; otherwise running statistics are used.
pub(crate) fn forward<F: Real, R: Rng>(
    layout: &EncoderLayout,
    p: &[F],
    running: &[F],
    x: ArrayView2<F>,
    train: Option<&mut R>,
) -> (Array2<F>, Option<EncoderCache<F>>) {
    let batch = x.nrows();
    match layout {
        EncoderLayout::Conv(l) => {
            let s = &l.spec;
            let (w0, b0) = effective_first_stage(l, p);
            let mut a = rows_to_cnt(x, s.input_channels, s.input_samples);
            let mut rng = train;
            let mut caches = Vec::new();
            for (i, st) in l.stages.iter().enumerate() {
                let w = match &st.w {
                    Some(r) => ArrayView2::from_shape((st.cout, st.cin * st.k), &p[r.clone()]).expect("layout"),
                    None => w0.view(),
                };
                let bias = (i == 0).then_some(b0.as_slice());
                let (z, cols) = conv_forward(&a, w, bias, st.k);
                let gamma = &p[st.gamma.clone()];
                let beta = &p[st.beta.clone()];
                let (mut e, bn) = match rng {
                    Some(_) => {
                        let (u, c) = bn_train(&z, gamma, beta, s.bn_eps);
                        (u, Some(c))
                    }
                    None => (
                        bn_eval(
                            &z,
                            gamma,
                            beta,
                            &running[st.rmean.clone()],
                            &running[st.rvar.clone()],
                            s.bn_eps,
                        ),
                        None,
                    ),
                };
                elu_inplace(e.as_slice_mut().expect("contiguous"));
                let (mut pooled, second) = maxpool2(&e);
                let mask = match rng.as_deref_mut() {
                    Some(r) if s.dropout > 0.0 => {
                        let m = dropout_mask(pooled.len(), s.dropout, r);
                        mul_inplace(pooled.as_slice_mut().expect("contiguous"), &m);
                        Some(m)
                    }
                    _ => None,
                };
                if let Some(bn) = bn {
                    caches.push(StageCache {
                        cols,
                        bn,
                        elu: e,
                        second,
                        mask,
                    });
                }
                a = pooled;
            }
            let h = flatten(a);
            let cache = rng.map(|_| EncoderCache {
                kind: CacheKind::Conv {
                    effective_w: w0,
                    stages: caches,
                },
                batch,
            });
            (h, cache)
        }
        EncoderLayout::Dense(l) => {
            let mut e = dense_forward(x, &p[l.w.clone()], &p[l.b.clone()]);
            elu_inplace(e.as_slice_mut().expect("contiguous"));
            match train {
                Some(rng) => {
                    let mask = (l.spec.dropout > 0.0).then(|| dropout_mask(e.len(), l.spec.dropout, rng));
                    let mut h = e.clone();
                    if let Some(m) = &mask {
                        mul_inplace(h.as_slice_mut().expect("contiguous"), m);
                    }
                    let cache = EncoderCache {
                        kind: CacheKind::Dense {
                            input: x.to_owned(),
                            elu: e,
                            mask,
                        },
                        batch,
                    };
                    (h, Some(cache))
                }
                None => (e, None),
            }
        }
    }
}

/// Fold the batch statistics of `cache` into the running estimates.
pub(crate) fn commit_running<F: Real>(layout: &EncoderLayout, running: &mut [F], cache: &EncoderCache<F>) {
    let (EncoderLayout::Conv(l), CacheKind::Conv { stages, .. }) = (layout, &cache.kind) else {
        return;
    };
    let m: F = cast(l.spec.bn_momentum);
    let keep = F::one() - m;
    for (st, sc) in l.stages.iter().zip(stages) {
        for (r, &v) in running[st.rmean.clone()].iter_mut().zip(&sc.bn.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in running[st.rvar.clone()].iter_mut().zip(&sc.bn.var_unbiased) {
            *r = keep * *r + m * v;
        }
    }
}

/// Replace the running estimates with the size-weighted average of per-batch
/// statistics from a dropout-free train-mode pass over `x` in chunks of
/// `batch` rows. Dropout ahead of each batch norm inflates the statistics the
/// momentum rule collects, which eval mode then misapplies.
pub(crate) fn recalibrate_running<F: Real>(
    layout: &EncoderLayout,
    p: &[F],
    running: &mut [F],
    x: ArrayView2<F>,
    batch: usize,
) {
    let EncoderLayout::Conv(l) = layout else {
        return;
    };
    let n = x.nrows();
    if n == 0 || batch == 0 {
        return;
    }
    let mut plain = l.clone();
    plain.spec.dropout = 0.0;
    let plain = EncoderLayout::Conv(plain);
    let mut sum = vec![0.0f64; running.len()];
    // Dropout is off, so this generator is never drawn from.
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    for start in (0..n).step_by(batch) {
        let end = (start + batch).min(n);
        let (_, cache) = forward(
            &plain,
            p,
            running,
            x.slice(ndarray::s![start..end, ..]),
            Some(&mut unused),
        );
        let Some(EncoderCache {
            kind: CacheKind::Conv { stages, .. },
            ..
        }) = cache
        else {
            return;
        };
        let w = (end - start) as f64;
        for (st, sc) in l.stages.iter().zip(&stages) {
            for (acc, &v) in sum[st.rmean.clone()].iter_mut().zip(&sc.bn.mean) {
                *acc += w * v.to_f64().unwrap_or(0.0);
            }
            for (acc, &v) in sum[st.rvar.clone()].iter_mut().zip(&sc.bn.var_unbiased) {
                *acc += w * v.to_f64().unwrap_or(0.0);
            }
        }
    }
    for (r, s) in running.iter_mut().zip(sum) {
        *r = cast(s / n as f64);
    }
}

/// Gradient of a loss w.r.t. the encoder parameters given `dh`.
pub(crate) fn backward<F: Real>(layout: &EncoderLayout, p: &[F], cache: &EncoderCache<F>, dh: &Array2<F>) -> Vec<F> {
    let mut grad = vec![F::zero(); layout.param_len()];
    match (layout, &cache.kind) {
        (EncoderLayout::Conv(l), CacheKind::Conv { effective_w, stages }) => {
            let n = cache.batch;
            let last = l.stages.last().expect("stage");
            let tf = last.tconv / 2;
            let mut da = dh
                .view()
                .into_shape_with_order((n, last.cout, tf))
                .expect("latent width")
                .permuted_axes([1, 0, 2])
                .as_standard_layout()
                .into_owned();
            for (i, (st, sc)) in l.stages.iter().zip(stages).enumerate().rev() {
                if let Some(m) = &sc.mask {
                    mul_inplace(da.as_slice_mut().expect("contiguous"), m);
                }
                let mut de = maxpool2_backward(&da, &sc.second, st.tconv);
                elu_backward_inplace(
                    de.as_slice_mut().expect("contiguous"),
                    sc.elu.as_slice().expect("contiguous"),
                );
                let (dz, dg, db) = bn_backward(&de, &sc.bn, &p[st.gamma.clone()]);
                grad[st.gamma.clone()].copy_from_slice(&dg);
                grad[st.beta.clone()].copy_from_slice(&db);
                let w = match &st.w {
                    Some(r) => ArrayView2::from_shape((st.cout, st.cin * st.k), &p[r.clone()]).expect("layout"),
                    None => effective_w.view(),
                };
                let input_shape = (i > 0).then_some((st.cin, n, st.tin));
                let (dw, dx) = conv_backward(&dz, &sc.cols, w, st.k, input_shape);
                match &st.w {
                    Some(r) => grad[r.clone()].copy_from_slice(dw.as_slice().expect("contiguous")),
                    None => {
                        let dbias: Vec<F> = dz.outer_iter().map(|c| c.sum()).collect();
                        first_stage_grads(l, p, &dw, &dbias, &mut grad);
                    }
                }
                if let Some(dx) = dx {
                    da = dx;
                }
            }
        }
        (EncoderLayout::Dense(l), CacheKind::Dense { input, elu, mask }) => {
            let mut de = dh.clone();
            if let Some(m) = mask {
                mul_inplace(de.as_slice_mut().expect("contiguous"), m);
            }
            elu_backward_inplace(
                de.as_slice_mut().expect("contiguous"),
                elu.as_slice().expect("contiguous"),
            );
            let (dw, db, _) = dense_backward(input.view(), &de, &p[l.w.clone()], false);
            grad[l.w.clone()].copy_from_slice(&dw);
            grad[l.b.clone()].copy_from_slice(&db);
        }
        _ => unreachable!("cache built by a different encoder"),
    }
    grad
}

/// Chain the folded first-stage gradients back onto the temporal and
/// spatial kernels.
fn first_stage_grads<F: Real>(l: &ConvLayout, p: &[F], dw0: &Array2<F>, db0: &[F], grad: &mut [F]) {
    let (f0, c, k) = (l.spec.temporal_filters, l.spec.input_channels, l.spec.temporal_kernel);
    let w1 = &p[l.w1.clone()];
    let b1 = &p[l.b1.clone()];
    let w2 = &p[l.w2.clone()];
    let mut dw1 = vec![F::zero(); f0 * k];
    let mut db1 = vec![F::zero(); f0];
    let mut dw2 = vec![F::zero(); f0 * f0 * c];
    for g in 0..f0 {
        for f in 0..f0 {
            for ch in 0..c {
                let idx = (g * f0 + f) * c + ch;
                let s = w2[idx];
                let mut acc = b1[f] * db0[g];
                for j in 0..k {
                    let d = dw0[[g, ch * k + j]];
                    dw1[f * k + j] += s * d;
                    acc += w1[f * k + j] * d;
                }
                db1[f] += s * db0[g];
                dw2[idx] = acc;
            }
        }
    }
    grad[l.w1.clone()].copy_from_slice(&dw1);
    grad[l.b1.clone()].copy_from_slice(&db1);
    grad[l.w2.clone()].copy_from_slice(&dw2);
}
