//! Label-preserving signal transforms for the custom pipeline.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const WARP_KNOTS: usize = 4;
pub const MAX_WARP: f64 = 0.10;
pub const QUANT_LEVELS: std::ops::RangeInclusive<usize> = 10..=30;
pub const DRIFT_ANCHORS: usize = 20;
pub const MAX_DRIFT: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    TimeWarp,
    RandomQuantize,
    Drift,
    Reverse,
}

impl Transform {
    pub const ALL: [Transform; 4] = [
        Transform::TimeWarp,
        Transform::RandomQuantize,
        Transform::Drift,
        Transform::Reverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::TimeWarp => "time_warp",
            Transform::RandomQuantize => "random_quantize",
            Transform::Drift => "drift",
            Transform::Reverse => "reverse",
        }
    }

    /// Applies the transform with freshly drawn parameters.
    pub fn apply_random<R: Rng>(self, x: &[f64], rng: &mut R) -> Vec<f64> {
        match self {
            Transform::TimeWarp => {
                let speeds: Vec<f64> = (0..WARP_KNOTS).map(|_| rng.random_range(1.0 - MAX_WARP..=1.0 + MAX_WARP)).collect();
                time_warp(x, &speeds)
            }
            Transform::RandomQuantize => random_quantize(x, rng.random_range(QUANT_LEVELS)),
            Transform::Drift => {
                let mut walk = 0.0;
                let anchors: Vec<f64> = (0..DRIFT_ANCHORS)
                    .map(|_| {
                        let v = walk;
                        walk += Distribution::<f64>::sample(&StandardNormal, rng);
                        v
                    })
                    .collect();
                let (lo, hi) = bounds(x);
                let max_abs = rng.random_range(0.0..=MAX_DRIFT) * (hi - lo);
                drift(x, &anchors, max_abs)
            }
            Transform::Reverse => reverse(x),
        }
    }
}

fn bounds(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value at `t` of the curve through `values` placed evenly over
/// `[0, len−1]`, blended between neighbouring knots with a smoothstep.
fn knot_curve(values: &[f64], len: usize, t: usize) -> f64 {
    if values.len() == 1 || len < 2 {
        return values[0];
    }
    let pos = t as f64 * (values.len() - 1) as f64 / (len - 1) as f64;
    let j = (pos.floor() as usize).min(values.len() - 2);
    let s = smoothstep(pos - j as f64);
    values[j] + s * (values[j + 1] - values[j])
}

pub fn reverse(x: &[f64]) -> Vec<f64> {
    x.iter().rev().copied().collect()
}

/// Rounds every sample to the nearest of `levels` evenly spaced values
/// spanning the signal's range. Constant signals pass through.
pub fn random_quantize(x: &[f64], levels: usize) -> Vec<f64> {
    let (lo, hi) = bounds(x);
    if levels < 2 || !(hi > lo) {
        return x.to_vec();
    }
    let step = (hi - lo) / (levels - 1) as f64;
    x.iter().map(|&v| lo + ((v - lo) / step).round() * step).collect()
}

/// Monotone map from output sample to (fractional) source position.
/// Local playback speeds are smoothly interpolated between `speeds`,
/// integrated, and rescaled so the map runs exactly from 0 to `len−1`.
pub fn warp_map(len: usize, speeds: &[f64]) -> Vec<f64> {
    assert!(!speeds.is_empty() && speeds.iter().all(|&s| s > 0.0), "speeds must be positive");
    if len < 2 {
        return vec![0.0; len];
    }
    let rate: Vec<f64> = (0..len).map(|t| knot_curve(speeds, len, t)).collect();
    let mut map = Vec::with_capacity(len);
    let mut acc = 0.0;
    map.push(0.0);
    for t in 1..len {
        acc += 0.5 * (rate[t - 1] + rate[t]);
        map.push(acc);
    }
    let scale = (len - 1) as f64 / acc;
    for m in &mut map {
        *m *= scale;
    }
    map[len - 1] = (len - 1) as f64;
    map
}

/// Resamples `x` along [`warp_map`]; length and both endpoints are kept.
pub fn time_warp(x: &[f64], speeds: &[f64]) -> Vec<f64> {
    let n = x.len();
    warp_map(n, speeds)
        .into_iter()
        .map(|p| {
            let i = (p.floor() as usize).min(n.saturating_sub(2));
            let f = p - i as f64;
            if i + 1 < n {
                x[i] + f * (x[i + 1] - x[i])
            } else {
                x[i]
            }
        })
        .collect()
}

/// Adds a slow baseline wander: the curve through `anchors`, shifted to
/// start at zero and scaled so its largest excursion equals `max_abs`.
pub fn drift(x: &[f64], anchors: &[f64], max_abs: f64) -> Vec<f64> {
    let n = x.len();
    let curve: Vec<f64> = (0..n).map(|t| knot_curve(anchors, n, t) - anchors[0]).collect();
    let peak = curve.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return x.to_vec();
    }
    x.iter().zip(&curve).map(|(v, c)| v + c * max_abs / peak).collect()
}
