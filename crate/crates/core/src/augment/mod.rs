//! Training-set oversampling: SMOTE, ADASYN and a pipeline of four signal
//! transforms. Everything operates on raw 1-D signals; inputs are never
//! modified and originals come first in the output.

mod transforms;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{class_counts, Dataset, EpochRecord};
use crate::error::{Error, Result};

pub use transforms::{drift, random_quantize, reverse, time_warp, warp_map, Transform, DRIFT_ANCHORS, WARP_KNOTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    None,
    Smote,
    Adasyn,
    Custom,
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentMethod::None => "none",
            AugmentMethod::Smote => "smote",
            AugmentMethod::Adasyn => "adasyn",
            AugmentMethod::Custom => "custom",
        })
    }
}

impl FromStr for AugmentMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentMethod::None),
            "smote" => Ok(AugmentMethod::Smote),
            "adasyn" => Ok(AugmentMethod::Adasyn),
            "custom" => Ok(AugmentMethod::Custom),
            _ => Err(Error::InvalidArgument(format!(
                "unknown augmentation `{s}` (expected none, smote, adasyn or custom)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub method: AugmentMethod,
    pub k_neighbors: usize,
    /// ADASYN balance level.
    pub beta: f64,
    /// Per-class size for the custom pipeline.
    pub target_per_class: usize,
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        AugmentPlan {
            method: AugmentMethod::None,
            k_neighbors: 5,
            beta: 1.0,
            target_per_class: 4000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentReport {
    pub method: AugmentMethod,
    pub before: Vec<usize>,
    pub after: Vec<usize>,
}

/// Applies `plan` to a training set.
pub fn augment(train: &Dataset, plan: &AugmentPlan) -> Result<(Dataset, AugmentReport)> {
    let k = train.num_classes();
    let records = match plan.method {
        AugmentMethod::None => train.records.clone(),
        AugmentMethod::Smote => smote(&train.records, k, plan.k_neighbors, plan.seed)?,
        AugmentMethod::Adasyn => adasyn(&train.records, k, plan.k_neighbors, plan.beta, plan.seed)?,
        AugmentMethod::Custom => custom_augment(&train.records, k, plan.target_per_class, plan.seed)?,
    };
    let report = AugmentReport {
        method: plan.method,
        before: train.class_counts(),
        after: class_counts(&records, k),
    };
    Ok((
        Dataset {
            class_names: train.class_names.clone(),
            records,
        },
        report,
    ))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices (into `pool`) of the `k` nearest pool members to `query`,
/// skipping `exclude`; ties go to the lower index.
fn nearest(records: &[EpochRecord], pool: &[usize], query: usize, exclude: usize, k: usize) -> Vec<usize> {
    let q = &records[query].signal;
    let mut d: Vec<(f64, usize)> = pool
        .iter()
        .filter(|&&i| i != exclude)
        .map(|&i| (sq_dist(q, &records[i].signal), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.into_iter().map(|(_, i)| i).collect()
}

fn members(records: &[EpochRecord], class: u8) -> Vec<usize> {
    (0..records.len()).filter(|&i| records[i].label == class).collect()
}

fn interpolate(x: &[f64], n: &[f64], u: f64) -> Vec<f64> {
    x.iter().zip(n).map(|(&a, &b)| a + u * (b - a)).collect()
}

fn synthetic(signal: Vec<f64>, label: u8, method: &str, index: usize) -> EpochRecord {
    EpochRecord {
        signal,
        label,
        subject_id: format!("synthetic/{method}"),
        epoch_index: index,
    }
}

fn require_neighbors(class: usize, count: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k_neighbors must be at least 1".into()));
    }
    if count <= k {
        return Err(Error::ClassTooSmall {
            class: class.to_string(),
            count,
            needed: k + 1,
        });
    }
    Ok(())
}

/// Same-class neighbour lists for every member of a class, computed in
/// parallel.
fn class_neighbors(records: &[EpochRecord], idx: &[usize], k: usize) -> BTreeMap<usize, Vec<usize>> {
    idx.par_iter()
        .map(|&i| (i, nearest(records, idx, i, i, k)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Oversamples every class to the largest class count by interpolating
/// between a random member and one of its `k` nearest same-class
/// neighbours (Euclidean on the raw signal).
pub fn smote(records: &[EpochRecord], num_classes: usize, k: usize, seed: u64) -> Result<Vec<EpochRecord>> {
    let counts = class_counts(records, num_classes);
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    for (class, &count) in counts.iter().enumerate() {
        let need = max - count;
        if need == 0 {
            continue;
        }
        require_neighbors(class, count, k)?;
        let idx = members(records, class as u8);
        let neighbors = class_neighbors(records, &idx, k);
        for s in 0..need {
            let x = idx[rng.random_range(0..idx.len())];
            let nb = &neighbors[&x];
            let n = nb[rng.random_range(0..nb.len())];
            let u: f64 = rng.random();
            let signal = interpolate(&records[x].signal, &records[n].signal, u);
            out.push(synthetic(signal, class as u8, "smote", s));
        }
    }
    Ok(out)
}

/// Adaptive synthetic sampling. Each minority member's share of the
/// `β·(majority − count)` new samples is proportional to the fraction of
/// other-class points among its `k` nearest neighbours in the whole set.
/// A class with no such points anywhere (perfectly separated) gets no
/// synthetic samples.
pub fn adasyn(records: &[EpochRecord], num_classes: usize, k: usize, beta: f64, seed: u64) -> Result<Vec<EpochRecord>> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be non-negative, got {beta}")));
    }
    let counts = class_counts(records, num_classes);
    let max = counts.iter().copied().max().unwrap_or(0);
    let all: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    for (class, &count) in counts.iter().enumerate() {
        let g = (beta * (max - count) as f64).round() as usize;
        if g == 0 {
            continue;
        }
        require_neighbors(class, count, k)?;
        let idx = members(records, class as u8);
        let hardness: Vec<f64> = idx
            .par_iter()
            .map(|&i| {
                let nb = nearest(records, &all, i, i, k);
                nb.iter().filter(|&&j| records[j].label != class as u8).count() as f64 / k as f64
            })
            .collect();
        let total: f64 = hardness.iter().sum();
        if total == 0.0 {
            log::warn!("adasyn: class {class} is perfectly separated; no samples synthesized for it");
            continue;
        }
        let neighbors = class_neighbors(records, &idx, k);
        let mut made = 0;
        for (&x, &r) in idx.iter().zip(&hardness) {
            let gi = (r / total * g as f64).round() as usize;
            let nb = &neighbors[&x];
            for _ in 0..gi {
                let n = nb[rng.random_range(0..nb.len())];
                let u: f64 = rng.random();
                let signal = interpolate(&records[x].signal, &records[n].signal, u);
                out.push(synthetic(signal, class as u8, "adasyn", made));
                made += 1;
            }
        }
    }
    Ok(out)
}

/// Grows every class to `target` records by applying one uniformly chosen
/// transform to a random original of the class. Classes already at or
/// above the target are left as they are.
pub fn custom_augment(records: &[EpochRecord], num_classes: usize, target: usize, seed: u64) -> Result<Vec<EpochRecord>> {
    let counts = class_counts(records, num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::ClassTooSmall {
                class: class.to_string(),
                count: 0,
                needed: 1,
            });
        }
        let idx = members(records, class as u8);
        for s in 0..target.saturating_sub(count) {
            let src = &records[idx[rng.random_range(0..idx.len())]];
            let t = Transform::ALL[rng.random_range(0..Transform::ALL.len())];
            let signal = t.apply_random(&src.signal, &mut rng);
            out.push(synthetic(signal, class as u8, t.name(), s));
        }
    }
    Ok(out)
}
