//! Model-ready inputs: standardized signals, normalized TFR stacks
//! and targets, held as flat `f32` arrays and sliced into batches.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autodiff::{Float, Tensor};
use crate::dataset::{dataset_digest, Dataset, FinSet, Stage, N1_BINARY_NAMES, STAGE_NAMES};
use crate::dsp::{standardize_or_zero, EpochTransform, SstConfig, WINDOWS_PER_EPOCH};
use crate::error::{io, Error, Result};
use crate::models::{Batch, ModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<u8>, classes: usize },
    /// `[kurtosis, skewness]` per record.
    Moments(Vec<[f64; 2]>),
}

#[derive(Clone, Debug)]
pub struct Inputs {
    pub len: usize,
    pub signal_len: usize,
    pub signals: Option<Vec<f32>>,
    /// `(windows, h, w)` of one stack.
    pub tfr_shape: [usize; 3],
    pub tfr: Option<Vec<f32>>,
    pub targets: Targets,
}

fn normalized_signals<'a>(rows: impl IndexedParallelIterator<Item = &'a [f64]>) -> Vec<f32> {
    let parts: Vec<Vec<f32>> = rows.map(|s| standardize_or_zero(s).into_iter().map(|v| v as f32).collect()).collect();
    parts.concat()
}

/// Relabels a five-stage set as N1 vs everything else; a set that is
/// already binary passes through.
pub fn as_n1_binary(data: Dataset) -> Result<Dataset> {
    if data.class_names == N1_BINARY_NAMES {
        return Ok(data);
    }
    if data.class_names != STAGE_NAMES {
        return Err(Error::InvalidArgument(format!(
            "expected five-stage or N1/non-N1 classes, got {:?}",
            data.class_names
        )));
    }
    let n1 = Stage::N1.index();
    Ok(Dataset {
        class_names: N1_BINARY_NAMES.iter().map(|s| s.to_string()).collect(),
        records: data
            .records
            .into_iter()
            .map(|mut r| {
                r.label = u8::from(r.label == n1);
                r
            })
            .collect(),
    })
}

fn cache_file(dir: &Path, digest: &str, h: usize, w: usize) -> PathBuf {
    dir.join(format!("{}-{h}x{w}.tfr", &digest[..24]))
}

/// Normalized TFR stacks for every record, `N × 6·h·w` values. With a
/// cache directory the result is stored under the dataset's content
/// digest and reused on later calls.
pub fn tfr_stacks(data: &Dataset, h: usize, w: usize, cache_dir: Option<&Path>) -> Result<Vec<f32>> {
    let per = WINDOWS_PER_EPOCH * h * w;
    let cached = cache_dir.map(|d| cache_file(d, &dataset_digest(data), h, w));
    if let Some(path) = &cached {
        if let Ok(bytes) = fs::read(path) {
            if bytes.len() == 4 * per * data.len() {
                log::debug!("reusing time-frequency cache {}", path.display());
                return Ok(bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect());
            }
            log::warn!("ignoring time-frequency cache {} of the wrong size", path.display());
        }
    }
    let transform = EpochTransform::new(&SstConfig::default(), h, w)?;
    let parts: Vec<Vec<f32>> = data
        .records
        .par_iter()
        .map(|r| transform.apply(&r.signal))
        .collect::<Result<_>>()?;
    let flat = parts.concat();
    if let Some(path) = &cached {
        let dir = path.parent().expect("cache file has a parent");
        fs::create_dir_all(dir).map_err(io(dir))?;
        let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        let tmp = path.with_extension("tfr.tmp");
        fs::write(&tmp, bytes).map_err(io(&tmp))?;
        fs::rename(&tmp, path).map_err(io(path))?;
    }
    Ok(flat)
}

impl Inputs {
    pub fn fin(set: &FinSet) -> Self {
        Inputs {
            len: set.len(),
            signal_len: set.signal_len,
            signals: Some(normalized_signals(set.records.par_iter().map(|r| r.signal.as_slice()))),
            tfr_shape: [0; 3],
            tfr: None,
            targets: Targets::Moments(set.records.iter().map(|r| [r.kurtosis, r.skewness]).collect()),
        }
    }

    /// Epoch inputs; `tfr` is the resize target when the model needs
    /// time-frequency stacks.
    pub fn epochs(data: &Dataset, signal: bool, tfr: Option<(usize, usize)>, cache_dir: Option<&Path>) -> Result<Self> {
        data.validate()?;
        let signal_len = data.records.first().map_or(0, |r| r.signal.len());
        Ok(Inputs {
            len: data.len(),
            signal_len,
            signals: signal.then(|| normalized_signals(data.records.par_iter().map(|r| r.signal.as_slice()))),
            tfr_shape: tfr.map_or([0; 3], |(h, w)| [WINDOWS_PER_EPOCH, h, w]),
            tfr: tfr.map(|(h, w)| tfr_stacks(data, h, w, cache_dir)).transpose()?,
            targets: Targets::Classes {
                labels: data.labels(),
                classes: data.num_classes(),
            },
        })
    }

    pub fn labels(&self) -> Option<&[u8]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Moments(_) => None,
        }
    }

    /// Inputs and targets for the records at `idx`.
    pub fn batch<T: Float>(&self, idx: &[usize]) -> (Batch<T>, Tensor<T>) {
        let n = idx.len();
        let gather = |flat: &[f32], per: usize| -> Vec<T> {
            idx.iter()
                .flat_map(|&i| flat[i * per..(i + 1) * per].iter().map(|&v| T::of(v as f64)))
                .collect()
        };
        let signal = self.signals.as_ref().map(|s| {
            Tensor::new(vec![n, self.signal_len], gather(s, self.signal_len)).expect("signal batch shape")
        });
        let [c, h, w] = self.tfr_shape;
        let tfr = self
            .tfr
            .as_ref()
            .map(|t| Tensor::new(vec![n, c, h, w], gather(t, c * h * w)).expect("tfr batch shape"));
        let target = match &self.targets {
            Targets::Classes { labels, classes } => {
                let mut v = vec![T::zero(); n * classes];
                for (row, &i) in idx.iter().enumerate() {
                    v[row * classes + labels[i] as usize] = T::one();
                }
                Tensor::new(vec![n, *classes], v)
            }
            Targets::Moments(m) => Tensor::new(
                vec![n, 2],
                idx.iter().flat_map(|&i| m[i].map(|v| T::of(v))).collect(),
            ),
        }
        .expect("target batch shape");
        (Batch { signal, tfr }, target)
    }
}

/// Model input for one raw epoch: the min-max normalized signal and/or the
/// time-frequency stack, whichever the model's signature asks for.
pub fn epoch_batch(spec: &ModelSpec, transform: Option<&EpochTransform>, epoch: &[f64]) -> Result<Batch<f32>> {
    let mut batch = Batch::default();
    for (name, shape) in spec.input_signature() {
        if name == "signal" {
            if epoch.len() != shape[0] {
                return Err(Error::invalid_shape("epoch_batch", &[epoch.len()], format!("model expects {} samples", shape[0])));
            }
            let s: Vec<f32> = standardize_or_zero(epoch).into_iter().map(|v| v as f32).collect();
            batch.signal = Some(Tensor::new(vec![1, s.len()], s)?);
        } else {
            let t = transform.ok_or_else(|| Error::InvalidArgument("a time-frequency transform is required".into()))?;
            let [c, h, w] = t.output_shape();
            batch.tfr = Some(Tensor::new(vec![1, c, h, w], t.apply(epoch)?)?);
        }
    }
    Ok(batch)
}
