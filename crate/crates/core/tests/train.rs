use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepstage::autodiff::{Ctx, Mode, ParamGrads, ParamKind, ParamStore, Tape, Tensor};
use sleepstage::dataset::{gen_fin_corpus, gen_labeled_synthetic, save_dataset, split, SplitRatios};
use sleepstage::models::{build_fin, build_n1_detector, HeadKind, Model, ModelSpec, Scale};
use sleepstage::train::*;
use sleepstage::Error;

fn loss_of(kind: LossKind, pred: &[f64], target: &[f64], cols: usize, delta: f64) -> (f64, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let shape = vec![pred.len() / cols, cols];
    let p = tape.leaf(Tensor::from_f64(shape.clone(), pred).unwrap(), true);
    let t = tape.constant(Tensor::from_f64(shape, target).unwrap());
    let l = kind.apply(&mut tape, p, t, delta).unwrap();
    let v = tape.value(l).item();
    let g = tape.backward(l).unwrap();
    (v, g.get(p).unwrap().data().to_vec())
}

#[test]
fn huber_values() {
    assert!((loss_of(LossKind::Huber, &[0.5], &[0.0], 1, 1.0).0 - 0.125).abs() < 1e-15);
    assert!((loss_of(LossKind::Huber, &[2.0], &[0.0], 1, 1.0).0 - 1.5).abs() < 1e-15);
    // mean over elements
    let (v, _) = loss_of(LossKind::Huber, &[0.5, 2.0], &[0.0, 0.0], 2, 1.0);
    assert!((v - (0.125 + 1.5) / 2.0).abs() < 1e-15);
}

#[test]
fn huber_gradient_is_continuous_at_the_knee() {
    let h = 1e-6;
    let fd = |r: f64| {
        let f = |x: f64| loss_of(LossKind::Huber, &[x], &[0.0], 1, 1.0).0;
        (f(r + h) - f(r - h)) / (2.0 * h)
    };
    let left = fd(1.0 - 1e-3);
    let right = fd(1.0 + 1e-3);
    assert!((left - 0.999).abs() < 1e-6, "{left}");
    assert!((right - 1.0).abs() < 1e-6, "{right}");
    let g_at = loss_of(LossKind::Huber, &[1.0], &[0.0], 1, 1.0).1[0];
    assert!((g_at - 1.0).abs() < 1e-12);
}

#[test]
fn cross_entropy_examples() {
    let ce = LossKind::CategoricalCrossentropy;
    let (v, _) = loss_of(ce, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 3, 1.0);
    assert!(v.abs() <= 1e-6);
    let (v, _) = loss_of(ce, &[0.2; 5], &[0.0, 0.0, 1.0, 0.0, 0.0], 5, 1.0);
    assert!((v - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_targets() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::from_f64(vec![1, 3], &[0.2, 0.3, 0.5]).unwrap());
    for bad in [[0.5, 0.5, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]] {
        let t = tape.constant(Tensor::from_f64(vec![1, 3], &bad).unwrap());
        assert!(categorical_ce(&mut tape, p, t).is_err());
    }
    let t = tape.constant(Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap());
    assert!(categorical_ce(&mut tape, p, t).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn cross_entropy_matches_rowwise_sum(seed in any::<u64>(), rows in 1usize..6, cols in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::new();
        let mut onehot = vec![0.0; rows * cols];
        let mut want = 0.0;
        for r in 0..rows {
            let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = raw.iter().sum::<f64>() + 1e-12;
            let row: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let y = rng.random_range(0..cols);
            onehot[r * cols + y] = 1.0;
            want -= row[y].clamp(1e-7, 1.0 - 1e-7).ln();
            probs.extend(row);
        }
        want /= rows as f64;
        let (got, _) = loss_of(LossKind::CategoricalCrossentropy, &probs, &onehot, cols, 1.0);
        prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
    }
}

/// Store with one parameter `w` and gradients of `Σ w ⊙ g`.
fn store_and_grads(w: &[f64], g: &[f64]) -> (ParamStore<f64>, ParamGrads<f64>) {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_f64(vec![w.len()], w).unwrap(), ParamKind::Trainable);
    let grads = {
        let mut ctx = Ctx::new(&store, Mode::Train, 0);
        let wv = ctx.param(id);
        let c = ctx.tape.constant(Tensor::from_f64(vec![g.len()], g).unwrap());
        let m = ctx.tape.mul(wv, c).unwrap();
        let l = ctx.tape.sum(m);
        let mut gr = ctx.tape.backward(l).unwrap();
        ctx.param_grads(&mut gr)
    };
    (store, grads)
}

fn first(store: &ParamStore<f64>) -> Vec<f64> {
    store.iter().next().unwrap().1.value.data().to_vec()
}

#[test]
fn sgd_single_step() {
    let (mut store, grads) = store_and_grads(&[1.0], &[0.5]);
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.01)).unwrap();
    opt.step(&mut store, &grads).unwrap();
    assert!((first(&store)[0] - 0.995).abs() < 1e-15);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let (mut store, grads) = store_and_grads(&[0.3, -2.0], &[1.0, 1.0]);
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam, 1e-3)).unwrap();
    opt.step(&mut store, &grads).unwrap();
    // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε)
    let want = [0.3 - 1e-3 / (1.0 + 1e-8), -2.0 - 1e-3 / (1.0 + 1e-8)];
    for (a, b) in first(&store).iter().zip(want) {
        assert!((a - b).abs() < 1e-7);
    }
}

/// Hand-rolled multi-step references.
fn reference(kind: OptimizerKind, w0: f64, gs: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for (t, &g) in gs.iter().enumerate() {
        let t = (t + 1) as i32;
        match kind {
            OptimizerKind::Sgd => w -= lr * g,
            OptimizerKind::Adam => {
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            }
            OptimizerKind::Adamax => {
                m = b1 * m + (1.0 - b1) * g;
                v = (b2 * v).max(g.abs());
                w -= lr / (1.0 - b1.powi(t)) * m / (v + eps);
            }
        }
    }
    w
}

#[test]
fn optimizers_match_references_over_several_steps() {
    let gs = [2.0, 0.5, -1.5, 0.01];
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::Adamax] {
        let mut opt = Optimizer::new(OptimizerConfig::new(kind, 0.01)).unwrap();
        let mut w = 0.7;
        for &g in &gs {
            let (mut store, grads) = store_and_grads(&[w], &[g]);
            opt.step(&mut store, &grads).unwrap();
            w = first(&store)[0];
        }
        let want = reference(kind, 0.7, &gs, 0.01);
        assert!((w - want).abs() < 1e-7, "{kind:?}: {w} vs {want}");
    }
}

#[test]
fn adamax_keeps_infinity_norm() {
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adamax, 0.01)).unwrap();
    for g in [2.0, 0.5] {
        let (mut store, grads) = store_and_grads(&[0.0], &[g]);
        opt.step(&mut store, &grads).unwrap();
    }
    let u = opt.v[0].as_ref().unwrap()[0];
    assert!((u - 0.999 * 2.0).abs() < 1e-12);
}

#[test]
fn step_without_gradients_fails() {
    let (mut store, _) = store_and_grads(&[1.0], &[1.0]);
    let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
    assert!(matches!(opt.step(&mut store, &ParamGrads::empty(1)), Err(Error::NoGradients)));
}

#[test]
fn plateau_step_through() {
    let mut p = ReduceLrOnPlateau::new(PlateauConfig::default()).unwrap();
    let mut lr = 1e-3;
    for l in [5.0, 4.0, 3.0, 2.0, 1.0] {
        lr = p.step(l, lr);
    }
    assert_eq!(lr, 1e-3);

    let mut p = ReduceLrOnPlateau::new(PlateauConfig::default()).unwrap();
    let mut lrs = Vec::new();
    let mut lr = 1e-3;
    for _ in 0..4 {
        lr = p.step(1.0, lr);
        lrs.push(lr);
    }
    assert_eq!(lrs, [1e-3, 1e-3, 1e-3, 5e-4]);

    let mut p = ReduceLrOnPlateau::new(PlateauConfig::default()).unwrap();
    let mut lr = 1e-3;
    for _ in 0..200 {
        lr = p.step(1.0, lr);
        assert!(lr >= 1e-5);
    }
    assert_eq!(lr, 1e-5);
}

#[test]
fn early_stopping_step_through() {
    let mut e = EarlyStopping::new(10).unwrap();
    for (i, l) in (0..50).map(|i| 100.0 - i as f64).enumerate() {
        assert!(!e.update(l, i).stop);
    }
    let mut e = EarlyStopping::new(10).unwrap();
    let stops: Vec<bool> = (0..11).map(|i| e.update(1.0, i).stop).collect();
    assert!(!stops[..10].iter().any(|&s| s) && stops[10]);
    assert_eq!(e.best_epoch(), Some(0));
}

fn random_batch(model: &Model<f32>, n: usize, seed: u64) -> sleepstage::models::Batch<f32> {
    let mut b = model.probe_batch(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in [&mut b.signal, &mut b.tfr].into_iter().flatten() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    }
    b
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::Full {
        scale: Scale::Desk,
        head: HeadKind::Kan,
        signal_len: 3000,
        windows: 6,
    };
    let mut model = Model::<f32>::build(spec, 5).unwrap();
    let batch = random_batch(&model, 2, 1);
    let target = Tensor::new(vec![2, 5], vec![1.0, 0., 0., 0., 0., 0., 0., 1.0, 0., 0.]).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adamax, 1e-3)).unwrap();
    train_step(&mut model, &mut opt, LossKind::CategoricalCrossentropy, 1.0, &batch, &target, 3).unwrap();
    let before = model.predict(&batch).unwrap();

    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, Some(&opt), 4, Some(0.5)).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.epoch, 4);
    assert_eq!(loaded.best_metric, Some(0.5));
    assert_eq!(loaded.model.store.content_digest(), model.store.content_digest());
    let after = loaded.model.predict(&batch).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));
    let lopt = loaded.optimizer.unwrap();
    assert_eq!((lopt.step, lopt.lr), (opt.step, opt.lr));
    assert_eq!(lopt.m, opt.m);
    assert_eq!(lopt.v, opt.v);

    let header = read_checkpoint_header(&path).unwrap();
    assert_eq!(header.topology_digest, model.store.topology_digest());
    assert_eq!(header.tensors.len(), model.store.len());

    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::DigestMismatch { .. })));
    fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}

/// Five steps on one fixed batch with a fixed dropout stream.
fn descent(mut model: Model<f32>, loss: LossKind, opt: OptimizerConfig, target: Tensor<f32>) -> Vec<f64> {
    let n = target.shape()[0];
    let batch = random_batch(&model, n, 2);
    let mut opt = Optimizer::new(opt).unwrap();
    (0..6)
        .map(|_| train_step(&mut model, &mut opt, loss, 1.0, &batch, &target, 9).unwrap())
        .collect()
}

fn assert_descends(name: &str, losses: &[f64]) {
    assert!(losses[5] < losses[0], "{name}: {losses:?}");
}

#[test]
fn every_stage_descends_on_a_tiny_batch() {
    let fin = build_fin::<f32>(256, Scale::Desk, 1).unwrap();
    let moments = Tensor::new(vec![4, 2], vec![1.0, 0.5, -1.2, 0.0, 3.0, -1.0, 0.2, 0.8]).unwrap();
    let l = descent(fin, LossKind::Huber, OptimizerConfig::new(OptimizerKind::Adam, 1e-3), moments);
    assert_descends("fin", &l);

    let n1 = build_n1_detector::<f32>(Scale::Desk, 1).unwrap();
    let binary = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let l = descent(n1, LossKind::CategoricalCrossentropy, OptimizerConfig::new(OptimizerKind::Sgd, 1e-2), binary);
    assert_descends("n1", &l);

    let full = Model::<f32>::build(
        ModelSpec::Full {
            scale: Scale::Desk,
            head: HeadKind::Kan,
            signal_len: 3000,
            windows: 6,
        },
        1,
    )
    .unwrap();
    let mut stages = vec![0.0f32; 20];
    for (r, c) in [0, 2, 4, 1].iter().enumerate() {
        stages[r * 5 + c] = 1.0;
    }
    let target = Tensor::new(vec![4, 5], stages).unwrap();
    let l = descent(full, LossKind::CategoricalCrossentropy, OptimizerConfig::new(OptimizerKind::Adamax, 1e-3), target);
    assert_descends("full", &l);
}

#[test]
fn config_overlay_and_validation() {
    let cfg = RunConfig::from_json(StageKind::Full, &serde_json::json!({"epochs": 3, "optimizer": {"lr": 0.01}})).unwrap();
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.optimizer.kind, OptimizerKind::Adamax);
    assert_eq!(cfg.optimizer.lr, 0.01);
    assert_eq!(cfg.early_stop_patience, Some(10));
    assert!(RunConfig::from_json(StageKind::Fin, &serde_json::json!({"epoch": 3})).is_err());
    // full stage without donors and without the random-init ablation
    assert!(cfg.validate().is_err());
    let mut random = cfg.clone();
    random.init = FullInit::Random;
    assert!(random.validate().is_ok());
    let mut bad = random.clone();
    bad.batch_size = 0;
    assert!(bad.validate().is_err());
    let fin = RunConfig::defaults(StageKind::Fin);
    assert_eq!((fin.loss, fin.optimizer.kind, fin.batch_size, fin.epochs), (LossKind::Huber, OptimizerKind::Adam, 8, 20));
    let n1 = RunConfig::defaults(StageKind::N1);
    assert_eq!((n1.optimizer.kind, n1.optimizer.lr, n1.epochs), (OptimizerKind::Sgd, 1e-2, 100));
}

#[test]
fn fin_stage_is_deterministic_and_restores_best() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen_fin_corpus(48, 128, 1).unwrap().save(dir.path(), "train").unwrap();
    let val = gen_fin_corpus(16, 128, 2).unwrap().save(dir.path(), "val").unwrap();
    let run = |out: &str| {
        let mut cfg = RunConfig::defaults(StageKind::Fin);
        cfg.train = train.clone();
        cfg.val = val.clone();
        cfg.test = Some(val.clone());
        cfg.epochs = 3;
        cfg.seed = 11;
        cfg.out_dir = dir.path().join(out);
        train_stage(&cfg).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a.history, b.history);
    assert_eq!(fs::read(&a.metrics_log).unwrap(), fs::read(&b.metrics_log).unwrap());
    assert_eq!(a.history.len(), 3);
    assert!(a.history.iter().all(|r| r.val_mae.is_some() && r.val_acc.is_none()));

    let best = a.history.iter().min_by(|x, y| x.val_loss.total_cmp(&y.val_loss)).unwrap();
    assert_eq!(a.best_epoch, best.epoch);
    let saved = load_checkpoint::<f32>(&a.checkpoint).unwrap();
    assert_eq!(saved.epoch, a.best_epoch);
    assert_eq!(saved.model.store.content_digest(), a.model.store.content_digest());
    // test split equals the validation split here, so its loss is the best one
    let (_, eval) = a.test.unwrap();
    assert!((eval.loss - best.val_loss).abs() < 1e-12);
}

#[test]
fn full_stage_needs_donors_unless_random() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_labeled_synthetic(4, 1).unwrap();
    let s = split(&data, SplitRatios::default(), 0, false).unwrap();
    let mut cfg = RunConfig::defaults(StageKind::Full);
    cfg.train = save_dataset(dir.path(), "train", &s.train).unwrap();
    cfg.val = save_dataset(dir.path(), "val", &s.val).unwrap();
    cfg.out_dir = dir.path().join("run");
    cfg.fin_checkpoint = Some(dir.path().join("missing.ckpt"));
    cfg.n1_checkpoint = Some(dir.path().join("missing-too.ckpt"));
    assert!(train_stage(&cfg).is_err());
}

#[test]
fn n1_labels_collapse_to_binary() {
    let data = gen_labeled_synthetic(4, 1).unwrap();
    let b = as_n1_binary(data.clone()).unwrap();
    assert_eq!(b.class_counts(), vec![16, 4]);
    assert_eq!(as_n1_binary(b.clone()).unwrap(), b);
}

#[test]
fn seeds_are_spread() {
    let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|s| derive_seed(7, s)).collect();
    assert_eq!(seeds.len(), 1000);
    assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
}
