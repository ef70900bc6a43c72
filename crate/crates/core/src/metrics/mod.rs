//! Classification and regression reports, confusion matrices and latency
//! measurement. Metrics that are undefined for the data at hand (precision
//! of a class never predicted, recall of a class never present) are `None`
//! rather than 0, and averages skip them.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dsp::{EpochTransform, SstConfig};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::train::epoch_batch;

/// Counts with rows = true class and columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::InvalidArgument(format!("class index {} out of range for {k} classes", p.max(l))));
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn predicted(&self) -> Vec<u64> {
        (0..self.k()).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// Row percentages; an empty row is `None`.
    pub fn row_percent(&self) -> Vec<Option<Vec<f64>>> {
        self.counts
            .iter()
            .map(|r| {
                let s: u64 = r.iter().sum();
                (s > 0).then(|| r.iter().map(|&c| 100.0 * c as f64 / s as f64).collect())
            })
            .collect()
    }

    /// CSV with a header row of predicted classes and one row per true
    /// class; `percent` writes row percentages instead of counts.
    pub fn to_csv(&self, names: &[String], percent: bool) -> String {
        let mut s = String::from("true\\pred");
        for n in names {
            s += &format!(",{n}");
        }
        s.push('\n');
        let pct = self.row_percent();
        for (i, row) in self.counts.iter().enumerate() {
            s += &names[i];
            for (j, c) in row.iter().enumerate() {
                if percent {
                    match &pct[i] {
                        Some(p) => s += &format!(",{:.2}", p[j]),
                        None => s += ",",
                    }
                } else {
                    s += &format!(",{c}");
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub support: u64,
    pub precision: Option<f64>,
    /// Also the per-class accuracy.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total: u64,
    pub accuracy: f64,
    pub balanced_accuracy: Option<f64>,
    pub kappa: Option<f64>,
    pub per_class: Vec<ClassReport>,
    pub macro_avg: Average,
    pub weighted_avg: Average,
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// `2tp / (2tp + fp + fn)`: zero for a class that is never predicted but
/// present, undefined only when the class is absent from both sides.
fn f1(tp: u64, predicted: u64, support: u64) -> Option<f64> {
    ratio(2 * tp, predicted + support)
}

/// Mean of the defined values, weighted by `w`.
fn weighted_mean(values: impl Iterator<Item = (Option<f64>, f64)>) -> Option<f64> {
    let (mut s, mut w) = (0.0, 0.0);
    for (v, wt) in values {
        if let Some(v) = v {
            s += v * wt;
            w += wt;
        }
    }
    (w > 0.0).then(|| s / w)
}

/// Cohen's kappa, `(pₒ − pₑ)/(1 − pₑ)` with `pₑ` from the marginals;
/// undefined when `pₑ = 1` (a single class in both truth and prediction).
pub fn kappa(cm: &ConfusionMatrix) -> Option<f64> {
    let n = cm.total() as f64;
    if n == 0.0 {
        return None;
    }
    let po = (0..cm.k()).map(|i| cm.counts[i][i]).sum::<u64>() as f64 / n;
    let pe = cm
        .support()
        .iter()
        .zip(cm.predicted())
        .map(|(&r, c)| r as f64 * c as f64)
        .sum::<f64>()
        / (n * n);
    (pe < 1.0).then(|| (po - pe) / (1.0 - pe))
}

pub fn summary(cm: &ConfusionMatrix, names: &[String]) -> Result<Summary> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("cannot summarize an empty confusion matrix".into()));
    }
    if names.len() != cm.k() {
        return Err(Error::InvalidArgument(format!("{} class names for {} classes", names.len(), cm.k())));
    }
    let support = cm.support();
    let predicted = cm.predicted();
    let per_class: Vec<ClassReport> = (0..cm.k())
        .map(|i| {
            let tp = cm.counts[i][i];
            let precision = ratio(tp, predicted[i]);
            let recall = ratio(tp, support[i]);
            ClassReport {
                name: names[i].clone(),
                support: support[i],
                precision,
                recall,
                f1: f1(tp, predicted[i], support[i]),
            }
        })
        .collect();
    let avg = |weighted: bool| {
        let pick = |f: fn(&ClassReport) -> Option<f64>| {
            weighted_mean(per_class.iter().map(|c| (f(c), if weighted { c.support as f64 } else { 1.0 })))
        };
        Average {
            precision: pick(|c| c.precision),
            recall: pick(|c| c.recall),
            f1: pick(|c| c.f1),
        }
    };
    let trace: u64 = (0..cm.k()).map(|i| cm.counts[i][i]).sum();
    let macro_avg = avg(false);
    Ok(Summary {
        total,
        accuracy: trace as f64 / total as f64,
        balanced_accuracy: macro_avg.recall,
        kappa: kappa(cm),
        weighted_avg: avg(true),
        macro_avg,
        per_class,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v))
}

impl Summary {
    /// Aligned text report.
    pub fn to_text(&self) -> String {
        let w = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(0).max(12);
        let mut s = format!("{:<w$} {:>9} {:>9} {:>9} {:>8}\n", "", "precision", "recall", "f1", "support");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<w$} {:>9} {:>9} {:>9} {:>8}",
                c.name,
                cell(c.precision),
                cell(c.recall),
                cell(c.f1),
                c.support
            );
        }
        for (name, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            let _ = writeln!(
                s,
                "{:<w$} {:>9} {:>9} {:>9} {:>8}",
                name,
                cell(a.precision),
                cell(a.recall),
                cell(a.f1),
                self.total
            );
        }
        let _ = writeln!(s, "accuracy {:.4}", self.accuracy);
        let _ = writeln!(s, "balanced accuracy {}", cell(self.balanced_accuracy));
        let _ = writeln!(s, "cohen kappa {}", cell(self.kappa));
        s
    }
}

/// Error statistics of the moment regressor, `[kurtosis, skewness]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub count: usize,
    pub mse: [f64; 2],
    pub mae: [f64; 2],
}

pub fn regression_report(outputs: &[Vec<f64>], targets: &[[f64; 2]]) -> Result<RegressionReport> {
    if outputs.len() != targets.len() || outputs.is_empty() || outputs.iter().any(|o| o.len() != 2) {
        return Err(Error::InvalidArgument("need one 2-wide output per target".into()));
    }
    let n = outputs.len() as f64;
    let (mut mse, mut mae) = ([0.0; 2], [0.0; 2]);
    for (o, t) in outputs.iter().zip(targets) {
        for j in 0..2 {
            let e = o[j] - t[j];
            mse[j] += e * e / n;
            mae[j] += e.abs() / n;
        }
    }
    Ok(RegressionReport {
        count: outputs.len(),
        mse,
        mae,
    })
}

/// Per-call wall-clock statistics in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub reps: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        assert!(!ms.is_empty(), "no timing samples");
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 { ms[n / 2] } else { 0.5 * (ms[n / 2 - 1] + ms[n / 2]) };
        // nearest rank
        let p95 = ms[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats {
            reps: n,
            median_ms: median,
            p95_ms: p95,
            mean_ms: ms.iter().sum::<f64>() / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Raw epoch to class distribution.
    pub end_to_end: LatencyStats,
    /// Normalization and time-frequency transform only.
    pub preprocess: LatencyStats,
    /// Forward pass on prepared input only.
    pub model: LatencyStats,
}

impl LatencyReport {
    /// `|pre + model − end_to_end| / end_to_end` on medians.
    pub fn additivity_error(&self) -> f64 {
        let sum = self.preprocess.median_ms + self.model.median_ms;
        (sum - self.end_to_end.median_ms).abs() / self.end_to_end.median_ms
    }
}

fn time_ms<R>(f: impl FnOnce() -> Result<R>) -> Result<(f64, R)> {
    let t = Instant::now();
    let r = f()?;
    Ok((t.elapsed().as_secs_f64() * 1e3, r))
}

/// Times single-epoch inference: preprocessing, the forward pass and both
/// together, each `reps` times after `warmup` untimed runs.
pub fn latency_probe(model: &Model<f32>, epoch: &[f64], reps: usize, warmup: usize) -> Result<LatencyReport> {
    if reps == 0 {
        return Err(Error::InvalidArgument("latency probe needs at least one repetition".into()));
    }
    let needs_tfr = model.spec.input_signature().iter().any(|(n, _)| *n == "tfr");
    let transform = if needs_tfr {
        let (h, w) = model.spec.scale().dims().resize;
        Some(EpochTransform::new(&SstConfig::default(), h, w)?)
    } else {
        None
    };
    let prep = || epoch_batch(&model.spec, transform.as_ref(), epoch);
    let batch = prep()?;
    for _ in 0..warmup {
        model.predict(&prep()?)?;
    }
    let (mut pre, mut fwd, mut e2e) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..reps {
        pre.push(time_ms(prep)?.0);
        fwd.push(time_ms(|| model.predict(&batch))?.0);
        e2e.push(time_ms(|| model.predict(&prep()?))?.0);
    }
    Ok(LatencyReport {
        end_to_end: LatencyStats::from_samples(e2e),
        preprocess: LatencyStats::from_samples(pre),
        model: LatencyStats::from_samples(fwd),
    })
}
