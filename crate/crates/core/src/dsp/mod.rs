//! Signal synthesis, moment statistics, resampling, normalization,
//! windowing and the synchrosqueezing transform.

mod moments;
mod resample;
mod sst;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ResizePlan, Tensor};
use crate::error::{io, json, Error, Result};

pub use moments::{kurtosis, skewness};
pub use resample::{rational_ratio, resample, MAX_RATIO_TERM};
pub use sst::{log_frequencies, SstConfig, SstDetail, SstPlan};
pub use synth::{synth_signal, SynthKind, SynthParams};

/// Samples in one 30-second epoch at 100 Hz.
pub const EPOCH_LEN: usize = 3000;
pub const EPOCH_RATE_HZ: f64 = 100.0;
pub const WINDOWS_PER_EPOCH: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Self {
        Signal {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Time-frequency magnitudes, row-major with frequency as the slow axis
/// (row 0 is the lowest frequency).
#[derive(Clone, Debug, PartialEq)]
pub struct Tfr {
    pub magnitudes: Vec<f32>,
    pub freq_bins: usize,
    pub time_len: usize,
    pub freq_axis_hz: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl Tfr {
    pub fn at(&self, bin: usize, t: usize) -> f32 {
        self.magnitudes[bin * self.time_len + t]
    }

    /// Sum of magnitudes in each frequency row.
    pub fn row_mass(&self) -> Vec<f64> {
        self.magnitudes
            .chunks(self.time_len)
            .map(|r| r.iter().map(|&v| v as f64).sum())
            .collect()
    }
}

fn range(x: &[f64]) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Maps values affinely onto [0, 1]. Constant input is an error.
pub fn minmax_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = range(x);
    if x.is_empty() || !(hi > lo) {
        return Err(Error::InvalidArgument(
            "min-max normalization needs at least two distinct values".into(),
        ));
    }
    let span = hi - lo;
    Ok(x.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect())
}

/// Like [`minmax_normalize`], but constant input maps to zeros. Used inside
/// the preprocessing pipeline where a flat epoch must not abort a batch.
pub fn minmax_or_zero(x: &[f64]) -> Vec<f64> {
    minmax_normalize(x).unwrap_or_else(|_| vec![0.0; x.len()])
}

/// Zero mean, unit (population) variance; constant input maps to zeros.
/// Skewness and kurtosis are unchanged by it.
pub fn standardize_or_zero(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) || !var.is_finite() {
        return vec![0.0; x.len()];
    }
    let sd = var.sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

fn minmax_or_zero_f32(x: &mut [f32]) {
    let (lo, hi) = x
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let span = hi - lo;
        x.iter_mut().for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
    } else {
        x.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Splits a 3000-sample epoch into six 512-sample windows; the tail is
/// zero-padded to 3072.
pub fn window_epoch(x: &[f64], window_len: usize) -> Result<Vec<Vec<f64>>> {
    if x.len() != EPOCH_LEN {
        return Err(Error::InvalidShape {
            op: "window_epoch",
            shape: vec![x.len()],
            reason: format!("an epoch holds exactly {EPOCH_LEN} samples"),
        });
    }
    if window_len * WINDOWS_PER_EPOCH < EPOCH_LEN {
        return Err(Error::InvalidArgument(format!(
            "{WINDOWS_PER_EPOCH} windows of {window_len} cannot cover {EPOCH_LEN} samples"
        )));
    }
    Ok((0..WINDOWS_PER_EPOCH)
        .map(|w| {
            let mut win = vec![0.0; window_len];
            let start = w * window_len;
            if start < x.len() {
                let end = (start + window_len).min(x.len());
                win[..end - start].copy_from_slice(&x[start..end]);
            }
            win
        })
        .collect())
}

/// Epoch → normalized TFR stack of shape `(6, out_h, out_w)`.
///
/// The signal is min-max normalized, windowed, transformed window by
/// window, min-max normalized over the whole stack and finally resized
/// (an exact copy when the target equals the transform size).
pub struct EpochTransform {
    plan: SstPlan,
    out_h: usize,
    out_w: usize,
    resize: ResizePlan<f32>,
}

impl EpochTransform {
    pub fn new(cfg: &SstConfig, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("resize target must be positive".into()));
        }
        let plan = SstPlan::new(cfg, EPOCH_RATE_HZ)?;
        Ok(EpochTransform {
            resize: ResizePlan::new(cfg.freq_bins, cfg.window_len, out_h, out_w),
            plan,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [WINDOWS_PER_EPOCH, self.out_h, self.out_w]
    }

    pub fn plan(&self) -> &SstPlan {
        &self.plan
    }

    /// Full-resolution normalized stack `(6, freq_bins, window_len)`.
    pub fn full_stack(&self, epoch: &[f64]) -> Result<Vec<f32>> {
        let cfg = self.plan.config();
        let windows = window_epoch(&minmax_or_zero(epoch), cfg.window_len)?;
        let mut stack = Vec::with_capacity(WINDOWS_PER_EPOCH * cfg.freq_bins * cfg.window_len);
        for w in &windows {
            stack.extend_from_slice(&self.plan.transform(w)?.magnitudes);
        }
        minmax_or_zero_f32(&mut stack);
        Ok(stack)
    }

    pub fn apply(&self, epoch: &[f64]) -> Result<Vec<f32>> {
        let stack = self.full_stack(epoch)?;
        Ok(self.resize.forward(&stack, WINDOWS_PER_EPOCH, 1))
    }

    /// Transforms many epochs in parallel; output order follows input order.
    pub fn apply_batch(&self, epochs: &[&[f64]]) -> Result<Tensor<f32>> {
        let parts: Vec<Vec<f32>> = epochs.par_iter().map(|e| self.apply(e)).collect::<Result<_>>()?;
        let data: Vec<f32> = parts.into_iter().flatten().collect();
        let [w, h, wd] = self.output_shape();
        Tensor::new(vec![epochs.len(), w, h, wd], data)
    }
}

/// Sidecar manifest written next to an exported TFR blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfrManifest {
    pub shape: Vec<usize>,
    pub layout: String,
    pub dtype: String,
    pub sample_rate_hz: f64,
    pub freq_axis_hz: Vec<f64>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes magnitudes as little-endian `f32` (frequency-major) plus a JSON
/// sidecar `<path>.json` with the shape and frequency axis.
pub fn write_tfr(path: &Path, tfr: &Tfr) -> Result<()> {
    let bytes: Vec<u8> = tfr.magnitudes.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io(path))?;
    let manifest = TfrManifest {
        shape: vec![tfr.freq_bins, tfr.time_len],
        layout: "row-major, frequency rows ascending".into(),
        dtype: "f32-le".into(),
        sample_rate_hz: tfr.sample_rate_hz,
        freq_axis_hz: tfr.freq_axis_hz.clone(),
    };
    let side = sidecar(path);
    let text = serde_json::to_string_pretty(&manifest).map_err(json(&side))?;
    fs::write(&side, text).map_err(io(&side))
}

pub fn read_tfr(path: &Path) -> Result<Tfr> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(io(&side))?;
    let m: TfrManifest = serde_json::from_str(&text).map_err(json(&side))?;
    let bytes = fs::read(path).map_err(io(path))?;
    if m.shape.len() != 2 || bytes.len() != 4 * m.shape[0] * m.shape[1] || m.freq_axis_hz.len() != m.shape[0] {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("blob of {} bytes does not match shape {:?}", bytes.len(), m.shape),
        });
    }
    Ok(Tfr {
        magnitudes: bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        freq_bins: m.shape[0],
        time_len: m.shape[1],
        freq_axis_hz: m.freq_axis_hz,
        sample_rate_hz: m.sample_rate_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(minmax_normalize(&[1.0, 1.0]).is_err());
        assert_eq!(minmax_or_zero(&[1.0, 1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn windows_cover_the_epoch() {
        let x: Vec<f64> = (0..EPOCH_LEN).map(|i| i as f64 + 1.0).collect();
        let w = window_epoch(&x, 512).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(&w[5][..440], &x[2560..]);
        assert!(w[5][440..].iter().all(|&v| v == 0.0));
        assert!(window_epoch(&x[..2999], 512).is_err());
    }
}
