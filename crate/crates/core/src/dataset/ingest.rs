//! Native record format: per subject, `<id>.sig` holds one ASCII header
//! line `SLEEPSIG rate_hz=<r> length=<n>` followed by `n` little-endian
//! `f32` samples, and `<id>.ann` holds `epoch_index,stage` rows (blank
//! lines, `#` comments and a non-numeric header row are skipped).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{Dataset, EpochRecord, Stage};
use crate::dsp::{resample, Signal, EPOCH_LEN, EPOCH_RATE_HZ};
use crate::error::{io, Error, Result};

pub const SIGNAL_MAGIC: &str = "SLEEPSIG";

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub subjects: usize,
    pub epochs: usize,
    /// Epochs present in a signal with no usable stage annotation.
    pub dropped_unannotated: usize,
    /// Annotation rows pointing past the end of their signal.
    pub dropped_out_of_range: usize,
    /// Subjects whose signals were resampled, with their source rate.
    pub resampled: BTreeMap<String, f64>,
}

struct Header {
    rate_hz: f64,
    length: usize,
}

fn parse_header(line: &str, path: &Path) -> Result<Header> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(SIGNAL_MAGIC) {
        return Err(corrupt("missing SLEEPSIG header"));
    }
    let (mut rate, mut length) = (None, None);
    for kv in parts {
        match kv.split_once('=') {
            Some(("rate_hz", v)) => rate = v.parse::<f64>().ok(),
            Some(("length", v)) => length = v.parse::<usize>().ok(),
            _ => return Err(corrupt(&format!("unexpected header field `{kv}`"))),
        }
    }
    match (rate, length) {
        (Some(rate_hz), Some(length)) if rate_hz > 0.0 => Ok(Header { rate_hz, length }),
        _ => Err(corrupt("header needs a positive rate_hz and a length")),
    }
}

fn read_signal(path: &Path) -> Result<Signal> {
    let bytes = fs::read(path).map_err(io(path))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Corrupt {
        path: path.to_path_buf(),
        reason: "missing header line".into(),
    })?;
    let header = parse_header(&String::from_utf8_lossy(&bytes[..nl]), path)?;
    let body = &bytes[nl + 1..];
    if body.len() < 4 * header.length {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!(
                "truncated: header announces {} samples, blob holds {}",
                header.length,
                body.len() / 4
            ),
        });
    }
    let samples = body[..4 * header.length]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Signal::new(samples, header.rate_hz))
}

/// Rows `(epoch_index, stage token)`; the stage is `None` for tokens that
/// name no sleep stage.
fn read_annotations(path: &Path) -> Result<Vec<(usize, Option<Stage>)>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty());
        let (Some(idx), Some(stage)) = (cols.next(), cols.next()) else {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("line {}: expected `epoch_index,stage`", n + 1),
            });
        };
        match idx.parse::<usize>() {
            Ok(i) => rows.push((i, Stage::from_annotation(stage))),
            Err(_) if rows.is_empty() => continue, // header row
            Err(_) => {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("line {}: bad epoch index `{idx}`", n + 1),
                })
            }
        }
    }
    Ok(rows)
}

struct SubjectResult {
    records: Vec<EpochRecord>,
    unannotated: usize,
    out_of_range: usize,
    source_rate: f64,
}

fn ingest_subject(id: &str, sig: &Path, ann: &Path) -> Result<SubjectResult> {
    let raw = read_signal(sig)?;
    let source_rate = raw.sample_rate_hz;
    let signal = resample(&raw, EPOCH_RATE_HZ)?;
    let available = signal.len() / EPOCH_LEN;
    let rows = if ann.exists() { read_annotations(ann)? } else { Vec::new() };
    let mut labels: BTreeMap<usize, Stage> = BTreeMap::new();
    let mut out_of_range = 0;
    for (i, stage) in rows {
        if i >= available {
            out_of_range += 1;
        } else if let Some(s) = stage {
            labels.insert(i, s);
        }
    }
    let records: Vec<EpochRecord> = labels
        .iter()
        .map(|(&i, &s)| EpochRecord {
            signal: signal.samples[i * EPOCH_LEN..(i + 1) * EPOCH_LEN].to_vec(),
            label: s.index(),
            subject_id: id.to_string(),
            epoch_index: i,
        })
        .collect();
    Ok(SubjectResult {
        unannotated: available - records.len(),
        records,
        out_of_range,
        source_rate,
    })
}

/// Reads every `*.sig` under `records_dir` (annotations from
/// `annotations_dir`, default the same directory), resamples to 100 Hz
/// and cuts annotated 30-second epochs. Subjects are processed in
/// parallel; output is ordered by subject id then epoch index.
pub fn ingest(records_dir: &Path, annotations_dir: Option<&Path>) -> Result<(Dataset, IngestReport)> {
    let ann_dir = annotations_dir.unwrap_or(records_dir);
    let mut subjects: Vec<(String, PathBuf)> = fs::read_dir(records_dir)
        .map_err(io(records_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "sig"))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
        .collect();
    subjects.sort();
    if subjects.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no *.sig records found in {}",
            records_dir.display()
        )));
    }
    let results: Vec<SubjectResult> = subjects
        .par_iter()
        .map(|(id, sig)| ingest_subject(id, sig, &ann_dir.join(format!("{id}.ann"))))
        .collect::<Result<_>>()?;
    let mut report = IngestReport {
        subjects: subjects.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for ((id, _), r) in subjects.iter().zip(results) {
        report.dropped_unannotated += r.unannotated;
        report.dropped_out_of_range += r.out_of_range;
        if r.source_rate != EPOCH_RATE_HZ {
            report.resampled.insert(id.clone(), r.source_rate);
        }
        records.extend(r.records);
    }
    report.epochs = records.len();
    if report.dropped_unannotated > 0 || report.dropped_out_of_range > 0 {
        log::warn!(
            "ingest dropped {} unannotated epochs and {} out-of-range annotation rows",
            report.dropped_unannotated,
            report.dropped_out_of_range
        );
    }
    Ok((Dataset::stages(records), report))
}

/// Writes one subject in the native format.
pub fn write_subject(dir: &Path, id: &str, rate_hz: f64, samples: &[f32], annotations: &[(usize, &str)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut bytes = format!("{SIGNAL_MAGIC} rate_hz={rate_hz} length={}\n", samples.len()).into_bytes();
    bytes.extend(samples.iter().flat_map(|v| v.to_le_bytes()));
    let sig = dir.join(format!("{id}.sig"));
    fs::write(&sig, bytes).map_err(io(&sig))?;
    let mut text = String::from("epoch_index,stage\n");
    for (i, s) in annotations {
        text += &format!("{i},{s}\n");
    }
    let ann = dir.join(format!("{id}.ann"));
    fs::write(&ann, text).map_err(io(&ann))
}
