use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;

use proptest::prelude::*;
use sleepstage::dataset::*;
use sleepstage::dsp::EPOCH_LEN;
use sleepstage::Error;

fn sine(rate: f64, secs: f64, hz: f64) -> Vec<f32> {
    let n = (rate * secs) as usize;
    (0..n).map(|i| (2.0 * PI * hz * i as f64 / rate).sin() as f32).collect()
}

/// Record set with given class sizes, signals tagged by position.
fn toy(counts: &[usize]) -> Dataset {
    let mut records = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            records.push(EpochRecord {
                signal: vec![(records.len() as f64) * 1e-3; EPOCH_LEN],
                label: c as u8,
                subject_id: format!("s{}", i % 7),
                epoch_index: records.len(),
            });
        }
    }
    Dataset::stages(records)
}

fn ids(d: &Dataset) -> BTreeSet<(String, usize)> {
    d.records.iter().map(|r| (r.subject_id.clone(), r.epoch_index)).collect()
}

#[test]
fn annotation_tokens_map_to_stages() {
    assert_eq!(Stage::from_annotation("4"), Some(Stage::N3));
    assert_eq!(Stage::from_annotation("S3"), Some(Stage::N3));
    assert_eq!(Stage::from_annotation("W"), Some(Stage::W));
    assert_eq!(Stage::from_annotation("R"), Some(Stage::Rem));
    assert_eq!(Stage::from_annotation("1"), Some(Stage::N1));
    assert_eq!(Stage::from_annotation("?"), None);
    assert_eq!(Stage::from_annotation("M"), None);
}

#[test]
fn ingest_resamples_and_cuts_annotated_epochs() {
    let dir = tempfile::tempdir().unwrap();
    write_subject(dir.path(), "a", 250.0, &sine(250.0, 60.0, 1.0), &[(0, "W"), (1, "4")]).unwrap();
    let (data, report) = ingest(dir.path(), None).unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data.records[0].label, Stage::W.index());
    assert_eq!(data.records[1].label, Stage::N3.index());
    assert!(data.records.iter().all(|r| r.signal.len() == EPOCH_LEN));
    assert_eq!(report.resampled.get("a"), Some(&250.0));
    // away from the edges the 100 Hz copy follows the same 1 Hz sine
    for (i, &v) in data.records[0].signal.iter().enumerate().skip(100).take(2800) {
        let want = (2.0 * PI * i as f64 / 100.0).sin();
        assert!((v - want).abs() < 1e-2, "sample {i}: {v} vs {want}");
    }
}

#[test]
fn ingest_counts_unannotated_and_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    write_subject(dir.path(), "b", 100.0, &sine(100.0, 90.0, 2.0), &[(0, "2"), (2, "R"), (7, "W")]).unwrap();
    write_subject(dir.path(), "a", 100.0, &sine(100.0, 30.0, 2.0), &[(0, "1")]).unwrap();
    let (data, report) = ingest(dir.path(), None).unwrap();
    assert_eq!(report.subjects, 2);
    assert_eq!(data.len(), 3);
    assert_eq!(report.dropped_unannotated, 1);
    assert_eq!(report.dropped_out_of_range, 1);
    assert!(report.resampled.is_empty());
    // ordered by subject id
    assert_eq!(data.records[0].subject_id, "a");
}

#[test]
fn ingest_rejects_truncated_signal() {
    let dir = tempfile::tempdir().unwrap();
    write_subject(dir.path(), "a", 100.0, &sine(100.0, 30.0, 2.0), &[(0, "W")]).unwrap();
    let sig = dir.path().join("a.sig");
    let bytes = fs::read(&sig).unwrap();
    fs::write(&sig, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(ingest(dir.path(), None), Err(Error::Corrupt { .. })));
}

#[test]
fn split_counts_follow_ratios() {
    let data = toy(&[20, 20, 20, 20, 20]);
    let s = split(&data, SplitRatios::default(), 3, false).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    for d in [&s.train, &s.val, &s.test] {
        let n = d.len() as f64;
        for &c in &d.class_counts() {
            // stratified: each class holds a fifth of every split, ±1
            assert!((c as f64 - n / 5.0).abs() <= 1.0);
        }
    }
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let data = toy(&[31, 17, 44, 9, 12]);
    let a = split(&data, SplitRatios::default(), 11, false).unwrap();
    let b = split(&data, SplitRatios::default(), 11, false).unwrap();
    assert_eq!(a, b);
    let c = split(&data, SplitRatios::default(), 12, false).unwrap();
    assert_ne!(ids(&a.train), ids(&c.train));
    let (tr, va, te) = (ids(&a.train), ids(&a.val), ids(&a.test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(tr.len() + va.len() + te.len(), data.len());
}

#[test]
fn subject_level_split_keeps_subjects_whole() {
    let data = toy(&[30, 30, 30, 30, 30]);
    let s = split(&data, SplitRatios::default(), 5, true).unwrap();
    let subjects = |d: &Dataset| d.records.iter().map(|r| r.subject_id.clone()).collect::<BTreeSet<_>>();
    let (a, b, c) = (subjects(&s.train), subjects(&s.val), subjects(&s.test));
    assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    assert_eq!(s.train.len() + s.val.len() + s.test.len(), 150);
}

#[test]
fn split_rejects_bad_ratios() {
    let data = toy(&[5, 5, 5, 5, 5]);
    let bad = SplitRatios {
        train: 0.7,
        val: 0.2,
        test: 0.2,
    };
    assert!(split(&data, bad, 0, false).is_err());
}

#[test]
fn n1_quota_rule() {
    assert_eq!(n1_subset_quota(1815), 1816);
    assert_eq!(n1_subset_quota(40), 40);
    assert_eq!(n1_subset_quota(41), 40);
    assert_eq!(n1_subset_quota(43), 44);
    assert_eq!(n1_subset_quota(42), 42);
}

#[test]
fn n1_subset_draws_evenly() {
    let data = toy(&[40, 40, 40, 40, 40]);
    let sub = build_n1_subset(&data, 2).unwrap();
    assert_eq!(sub.class_names, N1_BINARY_NAMES);
    assert_eq!(sub.class_counts(), vec![40, 40]);
    // ten from each non-N1 stage; the toy signal encodes the source index
    let mut per_stage = [0usize; 5];
    for r in &sub.records {
        let src = (r.signal[0] * 1e3).round() as usize;
        let stage = data.records[src].label as usize;
        assert_eq!(r.label == 1, stage == Stage::N1.index() as usize);
        per_stage[stage] += 1;
    }
    assert_eq!(per_stage, [10, 40, 10, 10, 10]);
    assert_eq!(sub, build_n1_subset(&data, 2).unwrap());
}

#[test]
fn n1_subset_tops_up_short_classes() {
    let data = toy(&[50, 40, 50, 3, 50]);
    let sub = build_n1_subset(&data, 4).unwrap();
    assert_eq!(sub.class_counts(), vec![40, 40]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn n1_quota_is_close(n in 1usize..100_000) {
        prop_assert!(n1_subset_quota(n).abs_diff(n) <= 1);
    }
}

/// Power of `x` (100 Hz) at frequency `hz`.
fn power_at(x: &[f64], hz: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let a = 2.0 * PI * hz * i as f64 / 100.0;
        re += v * a.cos();
        im += v * a.sin();
    }
    re * re + im * im
}

#[test]
fn synthetic_classes_are_separable() {
    let data = gen_labeled_synthetic(40, 9).unwrap();
    assert_eq!(data.class_counts(), vec![40; 5]);
    assert_eq!(data, gen_labeled_synthetic(40, 9).unwrap());
    assert_ne!(dataset_digest(&data), dataset_digest(&gen_labeled_synthetic(40, 10).unwrap()));
    // label = band with the most power around its nominal frequency
    let correct = data
        .records
        .iter()
        .filter(|r| {
            let band = |f: f64| (-4..=4).map(|k| power_at(&r.signal, f * (1.0 + 0.01 * k as f64))).fold(0.0, f64::max);
            let best = CLASS_FREQS_HZ
                .iter()
                .enumerate()
                .max_by(|a, b| band(*a.1).total_cmp(&band(*b.1)))
                .unwrap()
                .0;
            best == r.label as usize
        })
        .count();
    assert!(correct as f64 / data.len() as f64 > 0.95, "{correct}/{}", data.len());
}

#[test]
fn manifest_roundtrip_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_labeled_synthetic(5, 1).unwrap();
    let path = save_dataset(dir.path(), "train", &data).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.class_names, data.class_names);
    assert_eq!(back.labels(), data.labels());
    for (a, b) in back.records.iter().zip(&data.records) {
        assert_eq!(a.subject_id, b.subject_id);
        assert!(a.signal.iter().zip(&b.signal).all(|(x, y)| *x == *y as f32 as f64));
    }
    assert_eq!(dataset_digest(&back), dataset_digest(&data));

    // flip one byte of the blob
    let blob = dir.path().join("train.f32");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[100] ^= 1;
    fs::write(&blob, &bytes).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::DigestMismatch { .. })));
}

#[test]
fn fin_corpus_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let set = gen_fin_corpus(9, 400, 3).unwrap();
    assert_eq!(set.len(), 9);
    let path = set.save(dir.path(), "fin").unwrap();
    assert_eq!(FinSet::load(&path).unwrap(), set);
    assert_eq!(set, gen_fin_corpus(9, 400, 3).unwrap());
}
