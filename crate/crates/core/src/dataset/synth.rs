use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    blob_path, f32_bytes, f32_rows, read_blob, read_json, sha256_hex, write_json, Dataset, EpochRecord,
    MANIFEST_VERSION,
};
use crate::dsp::{kurtosis, skewness, synth_signal, SynthKind, SynthParams, EPOCH_LEN, EPOCH_RATE_HZ};
use crate::error::{io, Error, Result};

/// Dominant oscillation of each pseudo-stage, in label order.
pub const CLASS_FREQS_HZ: [f64; 5] = [1.2, 2.5, 5.0, 9.0, 14.0];
/// Skew of each class's additive noise (sign and weight of an exponential
/// component mixed into Gaussian noise).
const CLASS_NOISE_SKEW: [f64; 5] = [-0.8, -0.4, 0.0, 0.4, 0.8];
const NOISE_STD: f64 = 0.3;

fn pseudo_stage(class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f = CLASS_FREQS_HZ[class] * rng.random_range(0.96..1.04);
    let amp = rng.random_range(0.7..1.3);
    let phase = rng.random_range(0.0..2.0 * PI);
    let harmonic = rng.random_range(0.0..0.3);
    let phase2 = rng.random_range(0.0..2.0 * PI);
    let offset = rng.random_range(-0.5..0.5);
    let s = CLASS_NOISE_SKEW[class];
    (0..EPOCH_LEN)
        .map(|i| {
            let t = i as f64 / EPOCH_RATE_HZ;
            let g: f64 = StandardNormal.sample(rng);
            let e: f64 = Exp1.sample(rng);
            let noise = NOISE_STD * ((1.0 - s.abs()) * g + s * (e - 1.0));
            offset
                + amp * (2.0 * PI * f * t + phase).sin()
                + amp * harmonic * (4.0 * PI * f * t + phase2).sin()
                + noise
        })
        .collect()
}

/// Five separable pseudo-stage classes, `per_class` records each, in
/// class-interleaved order.
pub fn gen_labeled_synthetic(per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 records per class, got {per_class}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(5 * per_class);
    for i in 0..per_class {
        for class in 0..5 {
            records.push(EpochRecord {
                signal: pseudo_stage(class, &mut rng),
                label: class as u8,
                subject_id: format!("synthetic-{}", i % 5),
                epoch_index: i,
            });
        }
    }
    Ok(Dataset::stages(records))
}

/// A signal with its exact moments (computed on the `f32`-rounded values
/// so that they survive a save/load round trip).
#[derive(Clone, Debug, PartialEq)]
pub struct FinRecord {
    pub signal: Vec<f64>,
    pub kind: SynthKind,
    pub kurtosis: f64,
    pub skewness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinSet {
    pub signal_len: usize,
    pub records: Vec<FinRecord>,
}

/// `count` signals cycling through chirp, step and uniform noise.
pub fn gen_fin_corpus(count: usize, signal_len: usize, seed: u64) -> Result<FinSet> {
    let params = SynthParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let kind = SynthKind::ALL[i % SynthKind::ALL.len()];
        loop {
            let s = synth_signal(kind, signal_len, rng.next_u64(), &params)?;
            let signal: Vec<f64> = s.samples.iter().map(|&v| v as f32 as f64).collect();
            match (kurtosis(&signal), skewness(&signal)) {
                (Ok(k), Ok(sk)) => {
                    records.push(FinRecord {
                        signal,
                        kind,
                        kurtosis: k,
                        skewness: sk,
                    });
                    break;
                }
                (Err(Error::ZeroVariance), _) | (_, Err(Error::ZeroVariance)) => continue,
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
    }
    Ok(FinSet { signal_len, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinManifest {
    pub format_version: u32,
    pub signal_len: usize,
    pub count: usize,
    pub kinds: Vec<SynthKind>,
    /// `[kurtosis, skewness]` per record.
    pub targets: Vec<[f64; 2]>,
    pub signals_file: String,
    pub signals_sha256: String,
}

impl FinSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let blob = f32_bytes(self.records.iter().map(|r| r.signal.as_slice()));
        let blob_name = format!("{name}.f32");
        let blob_file = dir.join(&blob_name);
        fs::write(&blob_file, &blob).map_err(io(&blob_file))?;
        let manifest = FinManifest {
            format_version: MANIFEST_VERSION,
            signal_len: self.signal_len,
            count: self.len(),
            kinds: self.records.iter().map(|r| r.kind).collect(),
            targets: self.records.iter().map(|r| [r.kurtosis, r.skewness]).collect(),
            signals_file: blob_name,
            signals_sha256: sha256_hex(&blob),
        };
        let path = dir.join(format!("{name}.json"));
        write_json(&path, &manifest)?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m: FinManifest = read_json(manifest_path)?;
        if m.format_version != MANIFEST_VERSION || m.kinds.len() != m.count || m.targets.len() != m.count {
            return Err(Error::Corrupt {
                path: manifest_path.to_path_buf(),
                reason: "inconsistent FIN manifest".into(),
            });
        }
        let blob = blob_path(manifest_path, &m.signals_file);
        let bytes = read_blob(&blob, &m.signals_sha256, 4 * m.count * m.signal_len)?;
        let records = f32_rows(&bytes, m.signal_len)
            .into_iter()
            .zip(m.kinds.iter().zip(&m.targets))
            .map(|(signal, (&kind, t))| FinRecord {
                signal,
                kind,
                kurtosis: t[0],
                skewness: t[1],
            })
            .collect();
        Ok(FinSet {
            signal_len: m.signal_len,
            records,
        })
    }
}
