//! Synthetic signals with a wide spread of skewness and kurtosis, used as
//! the first-stage training corpus.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Signal;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Chirp,
    Step,
    UniformNoise,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [SynthKind::Chirp, SynthKind::Step, SynthKind::UniformNoise];
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Chirp => "chirp",
            SynthKind::Step => "step",
            SynthKind::UniformNoise => "uniform_noise",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chirp" => Ok(SynthKind::Chirp),
            "step" => Ok(SynthKind::Step),
            "uniform_noise" | "noise" => Ok(SynthKind::UniformNoise),
            _ => Err(Error::InvalidArgument(format!(
                "unknown signal kind `{s}` (expected chirp, step or uniform_noise)"
            ))),
        }
    }
}

/// Ranges the generators draw from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub sample_rate_hz: f64,
    /// Lowest chirp frequency in Hz; the upper bound is `0.45·fs`.
    pub chirp_min_hz: f64,
    pub chirp_amplitude: (f64, f64),
    /// Inclusive range for the number of distinct step levels.
    pub step_levels: (usize, usize),
    pub level_bounds: (f64, f64),
    pub noise_bounds: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            sample_rate_hz: 100.0,
            chirp_min_hz: 0.5,
            chirp_amplitude: (0.5, 2.0),
            step_levels: (2, 6),
            level_bounds: (-3.0, 3.0),
            noise_bounds: (-3.0, 3.0),
        }
    }
}

fn draw_pair(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> (f64, f64) {
    loop {
        let a = rng.random_range(lo..hi);
        let b = rng.random_range(lo..hi);
        if (a - b).abs() > 1e-3 * (hi - lo) {
            return if a < b { (a, b) } else { (b, a) };
        }
    }
}

fn chirp(len: usize, p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = p.sample_rate_hz;
    let (lo, hi) = (p.chirp_min_hz, 0.45 * fs);
    let f0 = rng.random_range(lo..hi);
    let f1 = rng.random_range(lo..hi);
    let amp = rng.random_range(p.chirp_amplitude.0..p.chirp_amplitude.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let duration = len as f64 / fs;
    (0..len)
        .map(|i| {
            let t = i as f64 / fs;
            amp * (phase + 2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * duration))).sin()
        })
        .collect()
}

fn step(len: usize, levels: usize, p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let values: Vec<f64> = (0..levels)
        .map(|_| rng.random_range(p.level_bounds.0..p.level_bounds.1))
        .collect();
    // More segments than levels lets dwell times (and hence skewness) vary;
    // each segment keeps at least half of its even share so that no
    // level is a near-empty outlier.
    let segments = rng.random_range(levels.max(2)..=levels.max(2) * 2).min(len);
    let floor = len / (2 * segments);
    let spare = len - floor * segments;
    let mut marks: Vec<usize> = (0..segments - 1).map(|_| rng.random_range(0..=spare)).collect();
    marks.sort_unstable();
    marks.push(spare);
    let cuts: Vec<usize> = marks.iter().enumerate().map(|(k, &m)| m + floor * (k + 1)).collect();
    let mut out = Vec::with_capacity(len);
    let mut start = 0;
    for (k, &end) in cuts.iter().enumerate() {
        let level = if k < levels { values[k] } else { values[rng.random_range(0..levels)] };
        out.extend(std::iter::repeat_n(level, end - start));
        start = end;
    }
    out
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Generates one signal. Identical `(kind, length, seed, params)` give
/// identical samples.
///
/// A step draw that comes out constant (a single level, or every segment
/// landing on the same level) is redrawn with at least two levels.
pub fn synth_signal(kind: SynthKind, length: usize, seed: u64, params: &SynthParams) -> Result<Signal> {
    if length < 2 {
        return Err(Error::TooShort { min: 2, len: length });
    }
    if !(params.sample_rate_hz > 0.0) {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        SynthKind::Chirp => chirp(length, params, &mut rng),
        SynthKind::UniformNoise => {
            let (a, b) = draw_pair(&mut rng, params.noise_bounds.0, params.noise_bounds.1);
            (0..length).map(|_| rng.random_range(a..b)).collect()
        }
        SynthKind::Step => {
            let (lo, hi) = params.step_levels;
            let mut levels = rng.random_range(lo.max(1)..=hi.max(lo).max(1));
            loop {
                let s = step(length, levels, params, &mut rng);
                if !is_constant(&s) {
                    break s;
                }
                log::debug!("degenerate step signal (seed {seed}); redrawing");
                levels = levels.max(2);
            }
        }
    };
    Ok(Signal::new(samples, params.sample_rate_hz))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_length() {
        assert!(synth_signal(SynthKind::Chirp, 1, 0, &SynthParams::default()).is_err());
    }

    #[test]
    fn single_level_step_is_redrawn() {
        let p = SynthParams {
            step_levels: (1, 1),
            ..SynthParams::default()
        };
        for seed in 0..20 {
            let s = synth_signal(SynthKind::Step, 500, seed, &p).unwrap();
            assert!(!is_constant(&s.samples));
        }
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in SynthKind::ALL {
            assert_eq!(k.to_string().parse::<SynthKind>().unwrap(), k);
        }
    }
}
