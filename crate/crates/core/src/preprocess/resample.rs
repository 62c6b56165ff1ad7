//! Polyphase rational-ratio downsampling.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::error::{Error, Result};

const KAISER_BETA: f64 = 5.0;
const HALF_LEN_PER_RATE: usize = 10;
const MAX_FACTOR: u64 = 2000;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Reduced `(up, down)` factors for `to_hz / from_hz`, with rates resolved to
/// millihertz.
pub fn rational_ratio(from_hz: f64, to_hz: f64) -> Result<(u64, u64)> {
    let as_millis = |hz: f64| -> Result<u64> {
        let m = hz * 1000.0;
        if (m - m.round()).abs() > 1e-6 || m.round() < 1.0 {
            return Err(Error::Signal(format!(
                "rate {hz} Hz is not a whole number of millihertz"
            )));
        }
        Ok(m.round() as u64)
    };
    let (from, to) = (as_millis(from_hz)?, as_millis(to_hz)?);
    let g = gcd(from, to);
    let (up, down) = (to / g, from / g);
    if up.max(down) > MAX_FACTOR {
        return Err(Error::Signal(format!(
            "rate ratio {to_hz}/{from_hz} reduces to {up}/{down}, too fine for polyphase conversion"
        )));
    }
    Ok((up, down))
}

fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass with cutoff `1 / max(up, down)` of the
/// upsampled Nyquist rate, scaled by `up` for unit passband gain.
pub fn antialias_taps(up: u64, down: u64) -> Vec<f64> {
    let max_rate = up.max(down) as usize;
    let half = HALF_LEN_PER_RATE * max_rate;
    let len = 2 * half + 1;
    let cutoff = 1.0 / max_rate as f64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let mut taps: Vec<f64> = (0..len)
        .map(|n| {
            let m = n as f64 - half as f64;
            let sinc = if m == 0.0 {
                1.0
            } else {
                (PI * cutoff * m).sin() / (PI * cutoff * m)
            };
            let r = 2.0 * n as f64 / (len - 1) as f64 - 1.0;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            cutoff * sinc * window
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t *= up as f64 / sum;
    }
    taps
}

fn resample_row(x: &[f64], taps: &[f64], up: usize, down: usize, out_len: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let half = (taps.len() / 2) as isize;
    let (up_i, down_i) = (up as isize, down as isize);
    (0..out_len as isize)
        .map(|m| {
            // Position of this output on the upsampled grid, shifted by the
            // filter's group delay.
            let centre = m * down_i + half;
            // Taps k with (centre - k) divisible by `up` touch input samples.
            let first_k = centre.rem_euclid(up_i);
            let mut acc = 0.0;
            let mut k = first_k;
            while k < taps.len() as isize {
                let i = ((centre - k) / up_i).clamp(0, n - 1);
                acc += taps[k as usize] * x[i as usize];
                k += up_i;
            }
            acc
        })
        .collect()
}

/// Convert every row from `from_hz` to `to_hz`. Output length is
/// `floor(samples × to_hz / from_hz)`; edges are extended with the boundary
/// sample.
pub fn resample(signal: &Array2<f64>, from_hz: f64, to_hz: f64) -> Result<Array2<f64>> {
    if !(to_hz > 0.0 && from_hz.is_finite()) {
        return Err(Error::Signal(format!("invalid rates {from_hz} -> {to_hz} Hz")));
    }
    if from_hz < to_hz {
        return Err(Error::Signal(format!(
            "upsampling from {from_hz} Hz to {to_hz} Hz is not supported"
        )));
    }
    if from_hz == to_hz {
        return Ok(signal.clone());
    }
    let (up, down) = rational_ratio(from_hz, to_hz)?;
    let samples = signal.ncols();
    let out_len = (samples as u128 * up as u128 / down as u128) as usize;
    let mut out = Array2::zeros((signal.nrows(), out_len));
    if samples == 0 {
        return Ok(out);
    }
    let taps = antialias_taps(up, down);
    for (src, mut dst) in signal.outer_iter().zip(out.outer_iter_mut()) {
        let row = src.to_vec();
        let y = resample_row(&row, &taps, up as usize, down as usize, out_len);
        for (d, v) in dst.iter_mut().zip(y) {
            *d = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinusoid(freq: f64, rate: f64, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((1, n), |(_, i)| (2.0 * PI * freq * i as f64 / rate).sin())
    }

    /// Plain O(n²) DFT magnitude, independent of any FFT code.
    fn dft_peak_hz(x: &[f64], rate: f64) -> f64 {
        let n = x.len();
        let (mut best, mut best_k) = (0.0, 0);
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let ph = -2.0 * PI * (k * i) as f64 / n as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            let mag = re * re + im * im;
            if mag > best {
                best = mag;
                best_k = k;
            }
        }
        best_k as f64 * rate / n as f64
    }

    #[test]
    fn ratio_reduction() {
        assert_eq!(rational_ratio(200.0, 128.0).unwrap(), (16, 25));
        assert_eq!(rational_ratio(256.0, 128.0).unwrap(), (1, 2));
        assert!(rational_ratio(200.0, 0.0001).is_err());
    }

    #[test]
    fn halving_length() {
        let y = resample(&sinusoid(5.0, 256.0, 512), 256.0, 128.0).unwrap();
        assert_eq!(y.ncols(), 256);
    }

    #[test]
    fn equal_rates_are_identity() {
        let x = sinusoid(5.0, 128.0, 300);
        assert_eq!(resample(&x, 128.0, 128.0).unwrap(), x);
    }

    #[test]
    fn upsampling_is_rejected() {
        assert!(resample(&sinusoid(5.0, 128.0, 10), 128.0, 200.0).is_err());
    }

    #[test]
    fn five_hz_peak_survives_200_to_128() {
        let y = resample(&sinusoid(5.0, 200.0, 2000), 200.0, 128.0).unwrap();
        assert_eq!(y.ncols(), 1280);
        let row: Vec<f64> = y.row(0).to_vec();
        let peak = dft_peak_hz(&row, 128.0);
        let bin = 128.0 / row.len() as f64;
        assert!((peak - 5.0).abs() <= bin, "peak at {peak} Hz");
        // Amplitude preserved away from the edges.
        let amp = row[200..1000].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((amp - 1.0).abs() < 0.01, "{amp}");
    }

    #[test]
    fn aliasing_tone_is_suppressed() {
        // 90 Hz at 200 Hz would alias to 38 Hz at 128 Hz without filtering.
        let y = resample(&sinusoid(90.0, 200.0, 4000), 200.0, 128.0).unwrap();
        let inner = &y.row(0).to_vec()[200..2400];
        let rms = (inner.iter().map(|v| v * v).sum::<f64>() / inner.len() as f64).sqrt();
        assert!(rms < 0.01, "{rms}");
    }

    #[test]
    fn constant_is_preserved() {
        let x = Array2::from_elem((2, 333), 3.5);
        let y = resample(&x, 200.0, 128.0).unwrap();
        assert_eq!(y.ncols(), 333 * 16 / 25);
        assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-3), "{:?}", y.row(0));
    }

    #[test]
    fn window_counts_match_analytic_length() {
        for secs in [1.9, 2.0, 5.0, 10.0, 61.3] {
            let n = (secs * 200.0_f64).round() as usize;
            let y = resample(&Array2::zeros((1, n)), 200.0, 128.0).unwrap();
            let analytic = n * 128 / 200;
            assert_eq!(y.ncols(), analytic);
            assert_eq!(y.ncols() / 256, analytic / 256);
        }
    }
}
