//! Wavelet synchrosqueezing transform with an analytic Morlet wavelet.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Tfr;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SstConfig {
    /// Morlet centre parameter.
    pub mu: f64,
    /// Number of scales and of output frequency bins.
    pub freq_bins: usize,
    pub window_len: usize,
    pub f_min_hz: f64,
    /// Upper frequency as a fraction of the sample rate.
    pub f_max_fraction: f64,
    /// Coefficients with modulus at or below this are not reassigned.
    pub gamma: f64,
    /// Autoregressive order used to extend each window before the FFT.
    pub ar_order: usize,
}

impl Default for SstConfig {
    fn default() -> Self {
        SstConfig {
            mu: 6.0,
            freq_bins: 256,
            window_len: 512,
            f_min_hz: 0.2,
            f_max_fraction: 0.45,
            gamma: 1e-8,
            ar_order: 12,
        }
    }
}

/// Log-spaced frequency axis shared by the scales and the output bins.
pub fn log_frequencies(f_min: f64, f_max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![f_min];
    }
    let step = (f_max / f_min).ln() / (n - 1) as f64;
    (0..n).map(|i| f_min * (step * i as f64).exp()).collect()
}

/// Burg estimate of autoregressive coefficients `a`, with the model
/// `x[t] ≈ −Σ_k a[k]·x[t−1−k]`. Reflection coefficients stay inside the
/// unit circle, so the predictor is stable.
fn burg(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    let mut f: Vec<f64> = x.to_vec();
    let mut b: Vec<f64> = x.to_vec();
    let mut a: Vec<f64> = Vec::with_capacity(order);
    for m in 0..order.min(n.saturating_sub(1)) {
        let (mut num, mut den) = (0.0, 0.0);
        for t in (m + 1)..n {
            num += f[t] * b[t - 1];
            den += f[t] * f[t] + b[t - 1] * b[t - 1];
        }
        if den <= 0.0 {
            break;
        }
        let k = -2.0 * num / den;
        let prev = a.clone();
        a.push(k);
        for (i, ai) in a.iter_mut().enumerate().take(m) {
            *ai = prev[i] + k * prev[m - 1 - i];
        }
        for t in ((m + 1)..n).rev() {
            let ft = f[t];
            f[t] = ft + k * b[t - 1];
            b[t] = b[t - 1] + k * ft;
        }
    }
    a
}

/// Runs the predictor `count` steps past the end of `x`.
fn extrapolate(x: &[f64], a: &[f64], count: usize) -> Vec<f64> {
    let mut hist: Vec<f64> = x.to_vec();
    for _ in 0..count {
        let t = hist.len();
        let v: f64 = -a.iter().enumerate().map(|(k, c)| c * hist[t - 1 - k]).sum::<f64>();
        hist.push(v);
    }
    hist[x.len()..].to_vec()
}

/// Precomputed FFT plans and wavelet spectra for one window length and
/// sample rate. Cheap to share across threads.
pub struct SstPlan {
    cfg: SstConfig,
    sample_rate_hz: f64,
    pad: usize,
    n_fft: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    freqs: Vec<f64>,
    /// Angular frequency (rad/s) of each FFT bin.
    omega: Vec<f64>,
    log_f_min: f64,
    log_step: f64,
}

/// Squeezed magnitudes plus the L1 mass of the underlying wavelet
/// coefficients (for conservation checks).
pub struct SstDetail {
    pub tfr: Tfr,
    pub cwt_mass: f64,
}

impl SstPlan {
    pub fn new(cfg: &SstConfig, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz > 0.0) {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        let f_max = cfg.f_max_fraction * sample_rate_hz;
        if cfg.freq_bins < 2 || cfg.window_len < 4 || !(cfg.f_min_hz > 0.0 && cfg.f_min_hz < f_max) {
            return Err(Error::InvalidArgument(format!(
                "bad transform settings: {} bins, window {}, band [{}, {}] Hz",
                cfg.freq_bins, cfg.window_len, cfg.f_min_hz, f_max
            )));
        }
        let pad = cfg.window_len / 2;
        let n_fft = (cfg.window_len + 2 * pad).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n_fft);
        let inverse = planner.plan_fft_inverse(n_fft);
        let omega = (0..n_fft)
            .map(|k| {
                let k = if k <= n_fft / 2 { k as f64 } else { k as f64 - n_fft as f64 };
                2.0 * PI * sample_rate_hz * k / n_fft as f64
            })
            .collect();
        let freqs = log_frequencies(cfg.f_min_hz, f_max, cfg.freq_bins);
        Ok(SstPlan {
            cfg: cfg.clone(),
            sample_rate_hz,
            pad,
            n_fft,
            forward,
            inverse,
            log_f_min: cfg.f_min_hz.ln(),
            log_step: (f_max / cfg.f_min_hz).ln() / (cfg.freq_bins - 1) as f64,
            freqs,
            omega,
        })
    }

    pub fn config(&self) -> &SstConfig {
        &self.cfg
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    /// Demeaned window extended on both sides by Burg autoregressive
    /// prediction, tapered to zero with a half cosine, then zero filled.
    /// Prediction continues oscillations in phase across the window edges,
    /// which reflection cannot do, so ridges stay sharp up to the borders.
    fn padded(&self, x: &[f64]) -> Vec<Complex64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let centred: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let coeffs = burg(&centred, self.cfg.ar_order);
        let right = extrapolate(&centred, &coeffs, self.pad);
        let reversed: Vec<f64> = centred.iter().rev().copied().collect();
        let left = extrapolate(&reversed, &coeffs, self.pad);
        let taper = |d: usize| 0.5 * (1.0 + (PI * d as f64 / self.pad as f64).cos());

        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (i, &v) in centred.iter().enumerate() {
            buf[self.pad + i] = Complex64::new(v, 0.0);
        }
        for d in 1..=self.pad {
            buf[self.pad - d] = Complex64::new(left[d - 1] * taper(d), 0.0);
            buf[self.pad + x.len() - 1 + d] = Complex64::new(right[d - 1] * taper(d), 0.0);
        }
        buf
    }

    fn bin_of(&self, f: f64) -> Option<usize> {
        if !(f > 0.0) {
            return None;
        }
        let pos = ((f.ln() - self.log_f_min) / self.log_step).round();
        if pos < 0.0 || pos >= self.cfg.freq_bins as f64 {
            None
        } else {
            Some(pos as usize)
        }
    }

    pub fn transform(&self, x: &[f64]) -> Result<Tfr> {
        Ok(self.transform_detailed(x)?.tfr)
    }

    pub fn transform_detailed(&self, x: &[f64]) -> Result<SstDetail> {
        let len = self.cfg.window_len;
        if x.len() != len {
            return Err(Error::InvalidShape {
                op: "sst",
                shape: vec![x.len()],
                reason: format!("window must hold exactly {len} samples"),
            });
        }
        let nb = self.cfg.freq_bins;
        let mut squeezed = vec![Complex64::new(0.0, 0.0); nb * len];
        let mut cwt_mass = 0.0;
        let mut tfr = Tfr {
            magnitudes: vec![0.0; nb * len],
            freq_bins: nb,
            time_len: len,
            freq_axis_hz: self.freqs.clone(),
            sample_rate_hz: self.sample_rate_hz,
        };
        if x.iter().all(|&v| v == 0.0) {
            return Ok(SstDetail { tfr, cwt_mass });
        }

        let mut spectrum = self.padded(x);
        self.forward.process(&mut spectrum);
        let n = self.n_fft as f64;
        let mut w = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut dw = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let mu = self.cfg.mu;
        for &f in &self.freqs {
            let a = mu / (2.0 * PI * f);
            for k in 0..self.n_fft {
                let om = self.omega[k];
                let psi = if om > 0.0 { 2.0 * (-0.5 * (a * om - mu).powi(2)).exp() } else { 0.0 };
                let v = spectrum[k] * (psi / n);
                w[k] = v;
                dw[k] = v * Complex64::new(0.0, om);
            }
            self.inverse.process_with_scratch(&mut w, &mut scratch);
            self.inverse.process_with_scratch(&mut dw, &mut scratch);
            for t in 0..len {
                let wt = w[t + self.pad];
                let modulus = wt.norm();
                cwt_mass += modulus;
                if modulus <= self.cfg.gamma {
                    continue;
                }
                let inst = (dw[t + self.pad] * wt.conj()).im / (modulus * modulus * 2.0 * PI);
                if let Some(bin) = self.bin_of(inst) {
                    squeezed[bin * len + t] += wt;
                }
            }
        }
        for (m, c) in tfr.magnitudes.iter_mut().zip(&squeezed) {
            *m = c.norm() as f32;
        }
        Ok(SstDetail { tfr, cwt_mass })
    }
}
