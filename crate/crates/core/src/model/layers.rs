//! Batched layer kernels with hand-written backward passes.
//!
//! Convolutional activations use a `(channels, batch, time)` layout so a
//! channel's values over the batch are one contiguous slice.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::Real;

pub(crate) fn cast<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

/// Unfold `x` (cin, N, tin) into columns `(cin·k, N·tout)` for a valid
/// convolution with kernel length `k`.
pub(crate) fn im2col<F: Real>(x: &Array3<F>, k: usize) -> Array2<F> {
    let (cin, n, tin) = x.dim();
    let tout = tin + 1 - k;
    let mut cols = Array2::zeros((cin * k, n * tout));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for i in 0..cin {
        for j in 0..k {
            let row = &mut dst[(i * k + j) * n * tout..(i * k + j + 1) * n * tout];
            for s in 0..n {
                let base = (i * n + s) * tin + j;
                row[s * tout..(s + 1) * tout].copy_from_slice(&src[base..base + tout]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<F: Real>(cols: &Array2<F>, cin: usize, n: usize, tin: usize, k: usize) -> Array3<F> {
    let tout = tin + 1 - k;
    let mut x = Array3::zeros((cin, n, tin));
    let src = cols.as_slice().expect("standard layout");
    let dst = x.as_slice_mut().expect("standard layout");
    for i in 0..cin {
        for j in 0..k {
            let row = &src[(i * k + j) * n * tout..(i * k + j + 1) * n * tout];
            for s in 0..n {
                let base = (i * n + s) * tin + j;
                for (d, v) in dst[base..base + tout].iter_mut().zip(&row[s * tout..(s + 1) * tout]) {
                    *d += *v;
                }
            }
        }
    }
    x
}

/// Valid 1-D convolution. `w` is `(cout, cin·k)`.
pub(crate) fn conv_forward<F: Real>(
    x: &Array3<F>,
    w: ArrayView2<F>,
    bias: Option<&[F]>,
    k: usize,
) -> (Array3<F>, Array2<F>) {
    let (_, n, tin) = x.dim();
    let tout = tin + 1 - k;
    let cols = im2col(x, k);
    let mut out = w.dot(&cols);
    if let Some(b) = bias {
        for (mut row, &bv) in out.outer_iter_mut().zip(b) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    let cout = w.nrows();
    let out = out.into_shape_with_order((cout, n, tout)).expect("conv output shape");
    (out, cols)
}

/// Returns `(dW, dx)`; `dx` only when `input_shape` is given.
pub(crate) fn conv_backward<F: Real>(
    dz: &Array3<F>,
    cols: &Array2<F>,
    w: ArrayView2<F>,
    k: usize,
    input_shape: Option<(usize, usize, usize)>,
) -> (Array2<F>, Option<Array3<F>>) {
    let (cout, n, tout) = dz.dim();
    let dz_mat = dz
        .view()
        .into_shape_with_order((cout, n * tout))
        .expect("contiguous gradient");
    let dw = dz_mat.dot(&cols.t());
    let dx = input_shape.map(|(cin, n, tin)| {
        let dcols = w.t().dot(&dz_mat);
        col2im(&dcols, cin, n, tin, k)
    });
    (dw, dx)
}

pub(crate) struct BnCache<F> {
    pub xhat: Array3<F>,
    pub inv_std: Vec<F>,
    pub mean: Vec<F>,
    /// Unbiased batch variance, for the running estimate.
    pub var_unbiased: Vec<F>,
}

pub(crate) fn bn_train<F: Real>(z: &Array3<F>, gamma: &[F], beta: &[F], eps: f64) -> (Array3<F>, BnCache<F>) {
    let c = z.dim().0;
    let m = z.len() / c;
    let mut xhat = z.clone();
    let mut out = Array3::zeros(z.dim());
    let mut cache = BnCache {
        xhat: Array3::zeros((0, 0, 0)),
        inv_std: Vec::with_capacity(c),
        mean: Vec::with_capacity(c),
        var_unbiased: Vec::with_capacity(c),
    };
    let mf: F = cast(m as f64);
    for (ch, (mut xh, mut o)) in xhat.outer_iter_mut().zip(out.outer_iter_mut()).enumerate() {
        let vals = xh.as_slice_mut().expect("contiguous channel");
        let mean = vals.iter().copied().sum::<F>() / mf;
        let ss: F = vals.iter().map(|&v| (v - mean) * (v - mean)).sum();
        let var = ss / mf;
        let inv_std = F::one() / (var + cast(eps)).sqrt();
        for v in vals.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        let (g, b) = (gamma[ch], beta[ch]);
        for (ov, &xv) in o.iter_mut().zip(vals.iter()) {
            *ov = g * xv + b;
        }
        cache.mean.push(mean);
        cache.inv_std.push(inv_std);
        cache
            .var_unbiased
            .push(if m > 1 { ss / cast((m - 1) as f64) } else { var });
    }
    cache.xhat = xhat;
    (out, cache)
}

pub(crate) fn bn_eval<F: Real>(z: &Array3<F>, gamma: &[F], beta: &[F], mean: &[F], var: &[F], eps: f64) -> Array3<F> {
    let mut out = z.clone();
    for (ch, mut o) in out.outer_iter_mut().enumerate() {
        let scale = gamma[ch] / (var[ch] + cast(eps)).sqrt();
        let shift = beta[ch] - mean[ch] * scale;
        o.mapv_inplace(|v| v * scale + shift);
    }
    out
}

/// Returns `(dz, dgamma, dbeta)`.
pub(crate) fn bn_backward<F: Real>(du: &Array3<F>, cache: &BnCache<F>, gamma: &[F]) -> (Array3<F>, Vec<F>, Vec<F>) {
    let c = du.dim().0;
    let m = du.len() / c;
    let mf: F = cast(m as f64);
    let mut dz = Array3::zeros(du.dim());
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let d = du.index_axis(Axis(0), ch);
        let x = cache.xhat.index_axis(Axis(0), ch);
        let d = d.as_slice().expect("contiguous");
        let x = x.as_slice().expect("contiguous");
        let db: F = d.iter().copied().sum();
        let dg: F = d.iter().zip(x).map(|(&a, &b)| a * b).sum();
        let scale = gamma[ch] * cache.inv_std[ch] / mf;
        let mut out = dz.index_axis_mut(Axis(0), ch);
        for ((o, &dv), &xv) in out.iter_mut().zip(d).zip(x) {
            *o = scale * (mf * dv - db - xv * dg);
        }
        dgamma.push(dg);
        dbeta.push(db);
    }
    (dz, dgamma, dbeta)
}

pub(crate) fn elu_inplace<F: Real>(x: &mut [F]) {
    for v in x.iter_mut() {
        if *v <= F::zero() {
            *v = v.exp_m1();
        }
    }
}

/// Multiply `grad` by the ELU derivative, given the ELU output `y`.
pub(crate) fn elu_backward_inplace<F: Real>(grad: &mut [F], y: &[F]) {
    for (g, &yv) in grad.iter_mut().zip(y) {
        if yv <= F::zero() {
            *g *= yv + F::one();
        }
    }
}

/// Non-overlapping max-pool by 2 along time; odd lengths are floored.
/// Returns the output and, per output, whether the second input won.
pub(crate) fn maxpool2<F: Real>(x: &Array3<F>) -> (Array3<F>, Vec<bool>) {
    let (c, n, t) = x.dim();
    let tout = t / 2;
    let mut out = Array3::zeros((c, n, tout));
    let mut second = Vec::with_capacity(c * n * tout);
    let src = x.as_slice().expect("contiguous");
    for (r, dst) in out
        .as_slice_mut()
        .expect("contiguous")
        .chunks_mut(tout.max(1))
        .enumerate()
        .take(c * n)
    {
        let row = &src[r * t..(r + 1) * t];
        for (i, d) in dst.iter_mut().enumerate().take(tout) {
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            let pick = b > a;
            second.push(pick);
            *d = if pick { b } else { a };
        }
    }
    (out, second)
}

pub(crate) fn maxpool2_backward<F: Real>(dy: &Array3<F>, second: &[bool], t_in: usize) -> Array3<F> {
    let (c, n, tout) = dy.dim();
    let mut dx = Array3::zeros((c, n, t_in));
    let src = dy.as_slice().expect("contiguous");
    let dst = dx.as_slice_mut().expect("contiguous");
    for r in 0..c * n {
        for i in 0..tout {
            let j = r * tout + i;
            dst[r * t_in + 2 * i + second[j] as usize] = src[j];
        }
    }
    dx
}

/// Inverted dropout mask: zero with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<F: Real, R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<F> {
    let keep: F = cast(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
        .collect()
}

pub(crate) fn mul_inplace<F: Real>(x: &mut [F], mask: &[F]) {
    for (v, &m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// `h·Wᵀ + b` with `W` stored row-major as `(out, in)`.
pub(crate) fn dense_forward<F: Real>(h: ArrayView2<F>, w: &[F], b: &[F]) -> Array2<F> {
    let out = b.len();
    let w = ArrayView2::from_shape((out, h.ncols()), w).expect("dense weight shape");
    let mut y = h.dot(&w.t());
    for mut row in y.outer_iter_mut() {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    y
}

/// Returns `(dW, db, dh)` with `dW` flattened like the weights.
pub(crate) fn dense_backward<F: Real>(
    h: ArrayView2<F>,
    dy: &Array2<F>,
    w: &[F],
    need_dh: bool,
) -> (Vec<F>, Vec<F>, Option<Array2<F>>) {
    let out = dy.ncols();
    let dw = dy.t().dot(&h);
    let db = dy.sum_axis(Axis(0)).to_vec();
    let dh = need_dh.then(|| {
        let w = ArrayView2::from_shape((out, h.ncols()), w).expect("dense weight shape");
        dy.dot(&w)
    });
    (dw.into_raw_vec_and_offset().0, db, dh)
}

pub(crate) struct SoftmaxCe<F> {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Gradient of the mean loss w.r.t. the logits.
    pub dlogits: Array2<F>,
    pub correct: usize,
}

pub(crate) fn softmax_ce<F: Real>(logits: &Array2<F>, labels: &[usize]) -> SoftmaxCe<F> {
    let n = logits.nrows();
    let inv_n: F = cast(1.0 / n as f64);
    let mut dlogits = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    let mut correct = 0;
    for ((row, mut drow), &y) in logits.outer_iter().zip(dlogits.outer_iter_mut()).zip(labels) {
        let argmax = argmax(row.as_slice().expect("contiguous"));
        correct += (argmax == y) as usize;
        let max = row[argmax];
        let mut z = F::zero();
        for (d, &v) in drow.iter_mut().zip(row.iter()) {
            *d = (v - max).exp();
            z += *d;
        }
        loss += (z.ln() - (row[y] - max)).to_f64().unwrap_or(f64::NAN);
        for d in drow.iter_mut() {
            *d = *d / z * inv_n;
        }
        drow[y] -= inv_n;
    }
    SoftmaxCe {
        loss: loss / n as f64,
        dlogits,
        correct,
    }
}

/// Index of the first maximum.
pub(crate) fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
