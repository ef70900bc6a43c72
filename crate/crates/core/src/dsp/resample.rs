//! Rational-ratio polyphase resampling.

use std::f64::consts::PI;

use super::Signal;
use crate::error::{Error, Result};

/// Largest reduced numerator or denominator accepted.
pub const MAX_RATIO_TERM: u64 = 64;
const KAISER_BETA: f64 = 5.0;
/// Filter half-length per unit of `max(up, down)`.
const HALF_TAPS_PER_FACTOR: usize = 10;
/// Passband edge as a fraction of the lower rate's Nyquist frequency.
const CUTOFF: f64 = 0.9;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Finds `up/down == target/source` with both terms at most
/// [`MAX_RATIO_TERM`].
pub fn rational_ratio(source_hz: f64, target_hz: f64) -> Result<(u64, u64)> {
    let unsupported = || Error::UnsupportedRatio {
        from_hz: source_hz,
        to_hz: target_hz,
        supported: format!("target/source = p/q with p, q ≤ {MAX_RATIO_TERM} (e.g. 250→100, 256→100, 200→100)"),
    };
    if !(source_hz > 0.0 && target_hz > 0.0) || !source_hz.is_finite() || !target_hz.is_finite() {
        return Err(unsupported());
    }
    let ratio = target_hz / source_hz;
    for down in 1..=MAX_RATIO_TERM {
        let up = (ratio * down as f64).round();
        if up < 1.0 || up > MAX_RATIO_TERM as f64 {
            continue;
        }
        if (up / down as f64 - ratio).abs() <= 1e-9 * ratio {
            let up = up as u64;
            let g = gcd(up, down);
            return Ok((up / g, down / g));
        }
    }
    Err(unsupported())
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass at the upsampled rate, with gain `up`.
fn design_filter(up: usize, down: usize) -> Vec<f64> {
    let factor = up.max(down);
    let half = HALF_TAPS_PER_FACTOR * factor;
    let len = 2 * half + 1;
    let fc = CUTOFF / factor as f64;
    let norm = bessel_i0(KAISER_BETA);
    (0..len)
        .map(|k| {
            let t = k as f64 - half as f64;
            let sinc = if t == 0.0 { 1.0 } else { (PI * fc * t).sin() / (PI * fc * t) };
            let r = 2.0 * k as f64 / (len - 1) as f64 - 1.0;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
            up as f64 * fc * sinc * window
        })
        .collect()
}

/// Resamples to `target_hz`. Output length is `round(len·target/source)`;
/// equal rates return the signal unchanged.
pub fn resample(s: &Signal, target_hz: f64) -> Result<Signal> {
    let (up, down) = rational_ratio(s.sample_rate_hz, target_hz)?;
    if up == down {
        return Ok(Signal::new(s.samples.clone(), target_hz));
    }
    let (up, down) = (up as usize, down as usize);
    let h = design_filter(up, down);
    let half = (h.len() - 1) / 2;
    let n_in = s.samples.len();
    let n_out = ((n_in * up) as f64 / down as f64).round() as usize;
    let mut out = Vec::with_capacity(n_out);
    // y[m] = Σ_k h[k]·u[m·down + half − k], where u is x upsampled by
    // zero insertion. Only taps landing on multiples of `up` contribute.
    for m in 0..n_out {
        let centre = (m * down + half) as isize;
        // smallest k ≥ 0 with (centre − k) % up == 0
        let first = (centre.rem_euclid(up as isize)) as usize;
        let mut acc = 0.0;
        let mut k = first;
        while k < h.len() {
            let pos = centre - k as isize;
            if pos < 0 {
                break;
            }
            let idx = pos as usize / up;
            if idx < n_in {
                acc += h[k] * s.samples[idx];
            }
            k += up;
        }
        out.push(acc);
    }
    Ok(Signal::new(out, target_hz))
}
