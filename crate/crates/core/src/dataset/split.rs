use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, EpochRecord, Stage, N1_BINARY_NAMES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    fn check(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be in [0, 1] and sum to 1, got {all:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn parts(&self) -> [(&'static str, &Dataset); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Stratified, seeded split. At epoch level each class is shuffled and cut
/// by rounded ratios; at subject level whole subjects are shuffled and
/// assigned so that cumulative record counts track the ratios.
/// Within each split records keep their original order.
pub fn split(data: &Dataset, ratios: SplitRatios, seed: u64, subject_level: bool) -> Result<Splits> {
    ratios.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0u8; data.len()];
    if subject_level {
        let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in data.records.iter().enumerate() {
            by_subject.entry(r.subject_id.as_str()).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = by_subject.into_values().collect();
        groups.shuffle(&mut rng);
        let total = data.len() as f64;
        let mut seen = 0usize;
        for g in groups {
            let mid = (seen as f64 + g.len() as f64 / 2.0) / total;
            let part = if mid < ratios.train {
                0
            } else if mid < ratios.train + ratios.val {
                1
            } else {
                2
            };
            seen += g.len();
            for i in g {
                assign[i] = part;
            }
        }
    } else {
        for class in 0..data.num_classes() as u8 {
            let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.records[i].label == class).collect();
            idx.shuffle(&mut rng);
            let n = idx.len() as f64;
            let n_val = (n * ratios.val).round() as usize;
            let n_test = ((n * ratios.test).round() as usize).min(idx.len() - n_val);
            for (j, &i) in idx.iter().enumerate() {
                assign[i] = if j < n_val {
                    1
                } else if j < n_val + n_test {
                    2
                } else {
                    0
                };
            }
        }
    }
    let pick = |part: u8| Dataset {
        class_names: data.class_names.clone(),
        records: data
            .records
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == part)
            .map(|(r, _)| r.clone())
            .collect(),
    };
    let splits = Splits {
        train: pick(0),
        val: pick(1),
        test: pick(2),
    };
    for (name, d) in splits.parts() {
        for (c, &n) in d.class_counts().iter().enumerate() {
            if n == 0 {
                log::warn!("{name} split has no records of class {}", data.class_names[c]);
            }
        }
    }
    Ok(splits)
}

/// Non-N1 records to draw for `n1` N1 records: a multiple of four when that
/// lands within one of `n1` (1,815 → 1,816), else exactly `n1`.
pub fn n1_subset_quota(n1: usize) -> usize {
    let even = 4 * ((n1 as f64 / 4.0).round() as usize);
    if even.abs_diff(n1) <= 1 {
        even
    } else {
        n1
    }
}

/// All N1 records plus an even draw from W, N2, N3 and REM, relabelled
/// 1 = N1 and 0 = other. A class short of its share gives the remainder
/// to the others (with a warning).
pub fn build_n1_subset(train: &Dataset, seed: u64) -> Result<Dataset> {
    if train.num_classes() != Stage::ALL.len() {
        return Err(Error::InvalidArgument("the N1 subset needs a five-stage dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1_label = Stage::N1.index();
    let n1: Vec<&EpochRecord> = train.records.iter().filter(|r| r.label == n1_label).collect();
    if n1.is_empty() {
        return Err(Error::ClassTooSmall {
            class: "N1".into(),
            count: 0,
            needed: 1,
        });
    }
    let others = [Stage::W, Stage::N2, Stage::N3, Stage::Rem];
    let mut pools: Vec<Vec<usize>> = others
        .iter()
        .map(|s| {
            let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train.records[i].label == s.index()).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();

    // even shares, then hand out what short classes cannot supply
    let target = n1_subset_quota(n1.len());
    let mut take: Vec<usize> = (0..4).map(|i| target / 4 + usize::from(i < target % 4)).collect();
    loop {
        let deficit: usize = take.iter().zip(&pools).map(|(&t, p)| t.saturating_sub(p.len())).sum();
        if deficit == 0 {
            break;
        }
        for (t, p) in take.iter_mut().zip(&pools) {
            *t = (*t).min(p.len());
        }
        let mut open: Vec<usize> = (0..4).filter(|&i| pools[i].len() > take[i]).collect();
        if open.is_empty() {
            break;
        }
        open.sort_by_key(|&i| std::cmp::Reverse(pools[i].len() - take[i]));
        for k in 0..deficit {
            take[open[k % open.len()]] += 1;
        }
    }
    let drawn: usize = take.iter().sum();
    if drawn != target {
        log::warn!("only {drawn} non-N1 records available for the N1 subset (wanted {target})");
    } else if take.iter().zip(&pools).any(|(&t, p)| t == p.len() && t < target / 4) {
        log::warn!("N1 subset: a short class was topped up from the others; shares {take:?}");
    }

    let mut chosen: Vec<usize> = train
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == n1_label)
        .map(|(i, _)| i)
        .collect();
    for (pool, &t) in pools.iter_mut().zip(&take) {
        chosen.extend(pool.drain(..t));
    }
    chosen.sort_unstable();
    Ok(Dataset {
        class_names: N1_BINARY_NAMES.iter().map(|s| s.to_string()).collect(),
        records: chosen
            .into_iter()
            .map(|i| {
                let r = &train.records[i];
                EpochRecord {
                    label: u8::from(r.label == n1_label),
                    ..r.clone()
                }
            })
            .collect(),
    })
}
