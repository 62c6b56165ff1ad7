//! Butterworth bandpass design (bilinear transform, second-order sections)
//! and zero-phase forward-backward filtering.

use std::f64::consts::PI;

use ndarray::Array2;
use num_traits::Zero;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// One biquad `b0 + b1 z⁻¹ + b2 z⁻² / 1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        let num = self.b[0] + z_inv * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z_inv * self.a[1] + z2 * self.a[2];
        num / den
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Complex single-pass response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Magnitude in dB after forward-backward application (squared single-pass
    /// magnitude).
    pub fn zero_phase_gain_db(&self, freq_hz: f64, rate_hz: f64) -> f64 {
        20.0 * self.response(freq_hz, rate_hz).norm_sqr().log10()
    }
}

/// Digital Butterworth bandpass of the given prototype order (the cascade
/// has `order` sections and `2 × order` poles).
pub fn butter_bandpass(order: usize, band_hz: [f64; 2], rate_hz: f64) -> Result<Sos> {
    let [lo, hi] = band_hz;
    let nyquist = rate_hz / 2.0;
    if order < 1 {
        return Err(Error::Signal("filter order must be >= 1".into()));
    }
    if !(lo > 0.0 && lo < hi && hi < nyquist) {
        return Err(Error::Signal(format!(
            "band [{lo}, {hi}] Hz must satisfy 0 < lo < hi < Nyquist ({nyquist} Hz)"
        )));
    }
    let fs2 = 2.0 * rate_hz;
    let w1 = fs2 * (PI * lo / rate_hz).tan();
    let w2 = fs2 * (PI * hi / rate_hz).tan();
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    let mut z_poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * (bw / 2.0);
        let root = (half * half - w0_sq).sqrt();
        for s in [half + root, half - root] {
            z_poles.push((fs2 + s) / (fs2 - s));
        }
    }

    let sections = pair_poles(z_poles)
        .into_iter()
        .map(|(p1, p2)| {
            let a1 = -(p1 + p2).re;
            let a2 = (p1 * p2).re;
            Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, a1, a2],
            }
        })
        .collect::<Vec<_>>();
    let mut sos = Sos { sections };

    // Unit gain at the digital image of the analog centre frequency.
    let centre_hz = rate_hz / PI * (w0_sq.sqrt() / fs2).atan();
    let gain = sos.response(centre_hz, rate_hz).norm();
    for b in sos.sections[0].b.iter_mut() {
        *b /= gain;
    }
    Ok(sos)
}

/// Pair complex poles with their conjugates and leftover real poles with
/// each other.
fn pair_poles(poles: Vec<Complex64>) -> Vec<(Complex64, Complex64)> {
    const TOL: f64 = 1e-12;
    let (mut complex, mut real): (Vec<_>, Vec<_>) = poles.into_iter().partition(|p| p.im.abs() > TOL);
    complex.retain(|p| p.im > 0.0);
    complex.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    real.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut out: Vec<_> = complex.into_iter().map(|p| (p, p.conj())).collect();
    for pair in real.chunks(2) {
        let second = pair.get(1).copied().unwrap_or_else(Complex64::zero);
        out.push((Complex64::new(pair[0].re, 0.0), second));
    }
    out
}

/// Steady-state initial conditions of each section (transposed direct form
/// II) for a unit step input.
fn step_initial_state(sos: &Sos) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.sections
        .iter()
        .map(|s| {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            let dc = (b0 + b1 + b2) / (1.0 + a1 + a2);
            let zi = [scale * (dc - b0), scale * (b2 - a2 * dc)];
            scale *= dc;
            zi
        })
        .collect()
}

fn filter_in_place(sos: &Sos, zi: &[[f64; 2]], x0: f64, data: &mut [f64]) {
    for (s, init) in sos.sections.iter().zip(zi) {
        let [b0, b1, b2] = s.b;
        let [_, a1, a2] = s.a;
        let mut z1 = init[0] * x0;
        let mut z2 = init[1] * x0;
        for v in data.iter_mut() {
            let x = *v;
            let y = b0 * x + z1;
            z1 = b1 * x - a1 * y + z2;
            z2 = b2 * x - a2 * y;
            *v = y;
        }
    }
}

/// Zero-phase filtering of one signal: odd extension at both ends, steady
/// state initial conditions, forward pass, reversed pass.
pub fn sosfiltfilt(sos: &Sos, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (3 * (2 * sos.sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let zi = step_initial_state(sos);
    let first = ext[0];
    filter_in_place(sos, &zi, first, &mut ext);
    ext.reverse();
    let first = ext[0];
    filter_in_place(sos, &zi, first, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase Butterworth bandpass applied to every row.
pub fn bandpass(signal: &Array2<f64>, rate_hz: f64, band_hz: [f64; 2], order: usize) -> Result<Array2<f64>> {
    let sos = butter_bandpass(order, band_hz, rate_hz)?;
    let mut out = Array2::zeros(signal.dim());
    for (src, mut dst) in signal.outer_iter().zip(out.outer_iter_mut()) {
        let row: Vec<f64> = src.to_vec();
        for (d, v) in dst.iter_mut().zip(sosfiltfilt(&sos, &row)) {
            *d = v;
        }
    }
    Ok(out)
}
