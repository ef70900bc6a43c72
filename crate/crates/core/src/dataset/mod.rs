//! Labeled epoch records, on-disk manifests, ingestion, splitting, the
//! balanced N1 subset and synthetic corpora.

mod ingest;
mod split;
mod synth;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{EPOCH_LEN, EPOCH_RATE_HZ};
use crate::error::{io, json, Error, Result};

pub use ingest::{ingest, write_subject, IngestReport, SIGNAL_MAGIC};
pub use split::{build_n1_subset, n1_subset_quota, split, SplitRatios, Splits};
pub use synth::{gen_fin_corpus, gen_labeled_synthetic, FinRecord, FinSet, CLASS_FREQS_HZ};

/// AASM stages in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    W,
    N1,
    N2,
    N3,
    Rem,
}

pub const STAGE_NAMES: [&str; 5] = ["W", "N1", "N2", "N3", "REM"];
pub const N1_BINARY_NAMES: [&str; 2] = ["non-N1", "N1"];

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::W, Stage::N1, Stage::N2, Stage::N3, Stage::Rem];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Stage> {
        Stage::ALL.get(i as usize).copied()
    }

    /// Parses an annotation token. R&K stage 4 merges into N3; tokens that
    /// name no sleep stage (movement, unscored) give `None`.
    pub fn from_annotation(token: &str) -> Option<Stage> {
        match token.trim().to_ascii_uppercase().as_str() {
            "W" | "WAKE" | "0" => Some(Stage::W),
            "1" | "N1" | "S1" => Some(Stage::N1),
            "2" | "N2" | "S2" => Some(Stage::N2),
            "3" | "4" | "N3" | "N4" | "S3" | "S4" => Some(Stage::N3),
            "R" | "REM" | "5" => Some(Stage::Rem),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(STAGE_NAMES[*self as usize])
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::from_annotation(s).ok_or_else(|| Error::InvalidArgument(format!("unknown sleep stage `{s}`")))
    }
}

/// One 30-second epoch at 100 Hz with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub signal: Vec<f64>,
    pub label: u8,
    pub subject_id: String,
    pub epoch_index: usize,
}

/// Records plus the names of their label values.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub records: Vec<EpochRecord>,
}

impl Dataset {
    pub fn stages(records: Vec<EpochRecord>) -> Self {
        Dataset {
            class_names: STAGE_NAMES.iter().map(|s| s.to_string()).collect(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.records, self.num_classes())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.signal.len() != EPOCH_LEN {
                return Err(Error::InvalidArgument(format!(
                    "record {i} has {} samples, expected {EPOCH_LEN}",
                    r.signal.len()
                )));
            }
            if r.label as usize >= self.num_classes() {
                return Err(Error::InvalidArgument(format!("record {i} has label {} out of range", r.label)));
            }
        }
        Ok(())
    }
}

pub fn class_counts(records: &[EpochRecord], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for r in records {
        counts[r.label as usize] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub label: u8,
    pub subject_id: String,
    pub epoch_index: usize,
}

pub const MANIFEST_VERSION: u32 = 1;

/// JSON description of a record set; signals live in a separate
/// row-major little-endian `f32` blob next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sample_rate_hz: f64,
    pub epoch_len: usize,
    pub class_names: Vec<String>,
    pub count: usize,
    pub class_counts: Vec<usize>,
    pub signals_file: String,
    pub signals_sha256: String,
    pub records_sha256: String,
    pub records: Vec<RecordMeta>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn records_digest(meta: &[RecordMeta]) -> String {
    sha256_hex(serde_json::to_string(meta).expect("metadata serializes").as_bytes())
}

pub(crate) fn f32_bytes<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<u8> {
    rows.flat_map(|r| r.iter().flat_map(|&v| (v as f32).to_le_bytes())).collect()
}

pub(crate) fn f32_rows(bytes: &[u8], len: usize) -> Vec<Vec<f64>> {
    bytes
        .chunks_exact(4 * len)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        })
        .collect()
}

/// Reads a blob and checks its size and digest.
pub(crate) fn read_blob(path: &Path, expected_sha: &str, expected_len: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() != expected_len {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("expected {expected_len} bytes, found {}", bytes.len()),
        });
    }
    let found = sha256_hex(&bytes);
    if found != expected_sha {
        return Err(Error::DigestMismatch {
            path: path.to_path_buf(),
            expected: expected_sha.to_string(),
            found,
        });
    }
    Ok(bytes)
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(json(path))?;
    fs::write(path, text + "\n").map_err(io(path))
}

pub(crate) fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(json(path))
}

pub(crate) fn blob_path(manifest: &Path, file: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(file)
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.f32`; returns the manifest
/// path. Signals are stored as `f32`.
pub fn save_dataset(dir: &Path, name: &str, data: &Dataset) -> Result<PathBuf> {
    data.validate()?;
    fs::create_dir_all(dir).map_err(io(dir))?;
    let blob_name = format!("{name}.f32");
    let blob = f32_bytes(data.records.iter().map(|r| r.signal.as_slice()));
    let blob_file = dir.join(&blob_name);
    fs::write(&blob_file, &blob).map_err(io(&blob_file))?;
    let records: Vec<RecordMeta> = data
        .records
        .iter()
        .map(|r| RecordMeta {
            label: r.label,
            subject_id: r.subject_id.clone(),
            epoch_index: r.epoch_index,
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        sample_rate_hz: EPOCH_RATE_HZ,
        epoch_len: EPOCH_LEN,
        class_names: data.class_names.clone(),
        count: data.len(),
        class_counts: data.class_counts(),
        signals_file: blob_name,
        signals_sha256: sha256_hex(&blob),
        records_sha256: records_digest(&records),
        records,
    };
    let path = dir.join(format!("{name}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads a manifest and its blob, verifying both digests.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let m: DatasetManifest = read_json(manifest_path)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: manifest_path.to_path_buf(),
        reason,
    };
    if m.format_version != MANIFEST_VERSION {
        return Err(corrupt(format!("unsupported manifest version {}", m.format_version)));
    }
    if m.records.len() != m.count || m.epoch_len == 0 {
        return Err(corrupt(format!("{} records listed, count says {}", m.records.len(), m.count)));
    }
    let found = records_digest(&m.records);
    if found != m.records_sha256 {
        return Err(Error::DigestMismatch {
            path: manifest_path.to_path_buf(),
            expected: m.records_sha256,
            found,
        });
    }
    let blob = blob_path(manifest_path, &m.signals_file);
    let bytes = read_blob(&blob, &m.signals_sha256, 4 * m.count * m.epoch_len)?;
    let records = f32_rows(&bytes, m.epoch_len)
        .into_iter()
        .zip(m.records)
        .map(|(signal, meta)| EpochRecord {
            signal,
            label: meta.label,
            subject_id: meta.subject_id,
            epoch_index: meta.epoch_index,
        })
        .collect();
    let data = Dataset {
        class_names: m.class_names,
        records,
    };
    if data.class_counts() != m.class_counts {
        return Err(corrupt("class counts do not match the labels".into()));
    }
    Ok(data)
}

/// Digest identifying a record set's content (signals as stored plus
/// labels and provenance).
pub fn dataset_digest(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(f32_bytes(data.records.iter().map(|r| r.signal.as_slice())));
    for r in &data.records {
        h.update([r.label]);
        h.update(r.subject_id.as_bytes());
        h.update([0]);
        h.update((r.epoch_index as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}
