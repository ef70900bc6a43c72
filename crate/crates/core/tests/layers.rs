use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepstage::autodiff::{BsplineGrid, Ctx, Mode, ParamStore, Tensor, Var};
use sleepstage::layers::check::{check_all_layers, LAYER_KINDS};
use sleepstage::layers::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval<F>(store: &ParamStore<f64>, mode: Mode, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> sleepstage::Result<Var>,
{
    let mut ctx = Ctx::new(store, mode, 3);
    let xv = ctx.tape.constant(x.clone());
    let y = f(&mut ctx, xv).unwrap();
    ctx.tape.value(y).clone()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Direct summation with "same" padding, (n, h, w, ci) × (kh, kw, ci, co).
fn naive_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, dil: usize) -> Tensor<f64> {
    let (n, h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let pad = |inp: usize, out: usize, kk: usize| {
        let eff = (kk - 1) * dil + 1;
        let total = ((out - 1) * stride + eff).saturating_sub(inp);
        total / 2
    };
    let (ph, pw) = (pad(h, oh, kh), pad(w, ow, kw));
    let mut out = vec![0.0; n * oh * ow * co];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy * dil) as isize - ph as isize;
                            let ix = (ox * stride + dx * dil) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x.get(&[b, iy as usize, ix as usize, c]) * k.get(&[dy, dx, c, o]);
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, co], out).unwrap()
}

#[test]
fn conv1d_identity_zero_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let l = Conv1d::new(&mut Builder::new(&mut store, 1), "c", 1, 1, 3).unwrap();
    let x = random(&[1, 16, 1], &mut rng);
    *store.value_mut(l.kernel()) = Tensor::new(vec![1, 3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(eval(&store, Mode::Eval, &x, |c, v| l.forward(c, v)).data(), x.data());
    *store.value_mut(l.kernel()) = Tensor::zeros(vec![1, 3, 1, 1]);
    assert!(eval(&store, Mode::Eval, &x, |c, v| l.forward(c, v)).data().iter().all(|&v| v == 0.0));

    let mut store = ParamStore::new();
    let l = Conv1d::new(&mut Builder::new(&mut store, 2), "c", 2, 3, 3).unwrap();
    *store.value_mut(l.bias().unwrap()) = random(&[3], &mut rng);
    let x = random(&[2, 16, 2], &mut rng);
    let got = eval(&store, Mode::Eval, &x, |c, v| l.forward(c, v));
    // direct O(n·k) convolution, zero padding one sample each side
    let k = store.value(l.kernel());
    let bias = store.value(l.bias().unwrap());
    for b in 0..2 {
        for t in 0..16 {
            for o in 0..3 {
                let mut acc = bias.data()[o];
                for d in 0..3 {
                    let src = t as isize + d as isize - 1;
                    if (0..16).contains(&src) {
                        for c in 0..2 {
                            acc += x.get(&[b, src as usize, c]) * k.get(&[0, d, c, o]);
                        }
                    }
                }
                assert!((got.get(&[b, t, o]) - acc).abs() < 1e-6);
            }
        }
    }
    // channel mismatch
    let bad = random(&[1, 16, 3], &mut rng);
    let mut ctx = Ctx::new(&store, Mode::Eval, 0);
    let v = ctx.tape.constant(bad);
    assert!(l.forward(&mut ctx, v).is_err());
}

#[test]
fn conv2d_identity_stride_and_dilation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let l = Conv2d::new(&mut Builder::new(&mut store, 1), "c", 1, 1, (3, 3), 1, 1, false).unwrap();
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    *store.value_mut(l.kernel) = Tensor::new(vec![3, 3, 1, 1], k).unwrap();
    let x = random(&[1, 5, 7, 1], &mut rng);
    assert_eq!(eval(&store, Mode::Eval, &x, |c, v| l.forward(c, v)).data(), x.data());

    let mut store = ParamStore::new();
    let s2 = Conv2d::new(&mut Builder::new(&mut store, 1), "c", 2, 3, (3, 3), 2, 1, false).unwrap();
    let x = random(&[1, 8, 8, 2], &mut rng);
    assert_eq!(eval(&store, Mode::Eval, &x, |c, v| s2.forward(c, v)).shape(), &[1, 4, 4, 3]);

    let mut store = ParamStore::new();
    let d2 = Conv2d::new(&mut Builder::new(&mut store, 3), "c", 2, 3, (3, 3), 1, 2, false).unwrap();
    let x = random(&[2, 9, 9, 2], &mut rng);
    let got = eval(&store, Mode::Eval, &x, |c, v| d2.forward(c, v));
    let want = naive_conv2d(&x, store.value(d2.kernel), 1, 2);
    assert_close(got.data(), want.data(), 1e-6);
    for (stride, dil) in [(2, 1), (2, 3), (1, 3)] {
        let mut store = ParamStore::new();
        let l = Conv2d::new(&mut Builder::new(&mut store, 4), "c", 2, 2, (3, 3), stride, dil, false).unwrap();
        let got = eval(&store, Mode::Eval, &x, |c, v| l.forward(c, v));
        assert_close(got.data(), naive_conv2d(&x, store.value(l.kernel), stride, dil).data(), 1e-6);
    }

    let mut store = ParamStore::<f64>::new();
    assert!(Conv2d::new(&mut Builder::new(&mut store, 1), "z", 1, 1, (3, 3), 1, 0, false).is_err());
}

#[test]
fn batch_norm_running_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut Builder::new(&mut store, 1), "bn", 2);
    let x = random(&[6, 2], &mut rng).map(|v| 3.0 * v + 1.0);
    let mut ctx = Ctx::new(&store, Mode::Train, 0);
    let xv = ctx.tape.constant(x.clone());
    let y = bn.forward(&mut ctx, xv).unwrap();
    let out = ctx.tape.value(y).clone();
    let updates = ctx.take_updates();
    for c in 0..2 {
        let col: Vec<f64> = (0..6).map(|r| x.get(&[r, c])).collect();
        let mean = col.iter().sum::<f64>() / 6.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for r in 0..6 {
            let want = (col[r] - mean) / (var + 1e-5).sqrt();
            assert!((out.get(&[r, c]) - want).abs() < 1e-12);
        }
        assert!((updates[0].1.data()[c] - 0.1 * mean).abs() < 1e-12);
        assert!((updates[1].1.data()[c] - (0.9 + 0.1 * var)).abs() < 1e-12);
    }
    sleepstage::autodiff::apply_updates(&mut store, updates);
    let rm = store.value(bn.running_mean).clone();
    let rv = store.value(bn.running_var).clone();
    let e = eval(&store, Mode::Eval, &x, |c, v| bn.forward(c, v));
    for r in 0..6 {
        for c in 0..2 {
            let want = (x.get(&[r, c]) - rm.data()[c]) / (rv.data()[c] + 1e-5).sqrt();
            assert!((e.get(&[r, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn se_gates_and_channel_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut Builder::new(&mut store, 1), "se", 8, 8);
    let x = random(&[2, 3, 3, 8], &mut rng);

    // random gates: every channel is scaled by its gate
    let gates = eval(&store, Mode::Eval, &x, |c, v| se.gates(c, v));
    let y = eval(&store, Mode::Eval, &x, |c, v| se.forward(c, v));
    for b in 0..2 {
        for ch in 0..8 {
            let norm = |t: &Tensor<f64>| {
                (0..9).map(|p| t.get(&[b, p / 3, p % 3, ch]).powi(2)).sum::<f64>().sqrt()
            };
            let g = gates.get(&[b, ch]);
            assert!((norm(&y) - norm(&x) * g).abs() < 1e-12);
        }
    }

    *store.value_mut(se.excite.kernel) = Tensor::zeros(vec![1, 8]);
    *store.value_mut(se.excite.bias.unwrap()) = Tensor::full(vec![8], 60.0);
    assert_eq!(eval(&store, Mode::Eval, &x, |c, v| se.forward(c, v)).data(), x.data());
    *store.value_mut(se.excite.bias.unwrap()) = Tensor::full(vec![8], -800.0);
    assert!(eval(&store, Mode::Eval, &x, |c, v| se.forward(c, v)).data().iter().all(|&v| v == 0.0));
}

#[test]
fn aspp_branch_sum_zero_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let aspp = Aspp::new(&mut Builder::new(&mut store, 1), "aspp", 2, 3, &[1, 6, 12, 18], (8, 8)).unwrap();
    assert_eq!(aspp.rates, vec![1, 6, 7, 7]);
    let x = random(&[2, 8, 8, 2], &mut rng);
    let y = eval(&store, Mode::Train, &x, |c, v| aspp.forward(c, v));
    let by_parts = eval(&store, Mode::Train, &x, |c, v| {
        let parts: Vec<Var> = (0..4).map(|i| aspp.branch(c, v, i)).collect::<Result<_, _>>()?;
        let mut sum = parts[0];
        for p in &parts[1..] {
            sum = c.tape.add(sum, *p)?;
        }
        aspp.project.forward(c, sum)
    });
    assert_close(y.data(), by_parts.data(), 1e-12);

    for (conv, _) in &aspp.branches {
        *store.value_mut(conv.kernel) = Tensor::zeros(vec![3, 3, 2, 3]);
    }
    for mode in [Mode::Train, Mode::Eval] {
        assert!(eval(&store, mode, &x, |c, v| aspp.forward(c, v)).data().iter().all(|&v| v == 0.0));
    }

    // one branch, centre-tap identity: a linear projection of the input
    let mut store = ParamStore::new();
    let single = Aspp::new(&mut Builder::new(&mut store, 2), "a", 2, 2, &[1], (5, 5)).unwrap();
    let mut k = vec![0.0; 9 * 4];
    k[4 * 4] = 1.0; // centre, c_in 0 → c_out 0
    k[4 * 4 + 3] = 1.0; // centre, c_in 1 → c_out 1
    *store.value_mut(single.branches[0].0.kernel) = Tensor::new(vec![3, 3, 2, 2], k).unwrap();
    let x = random(&[1, 5, 5, 2], &mut rng).map(f64::abs);
    let y = eval(&store, Mode::Eval, &x, |c, v| single.forward(c, v));
    let p = store.value(single.project.kernel).clone();
    let s = 1.0 / (1.0 + 1e-5f64).sqrt();
    for pos in 0..25 {
        for o in 0..2 {
            let want: f64 = (0..2).map(|c| s * x.data()[pos * 2 + c] * p.get(&[0, 0, c, o])).sum();
            assert!((y.data()[pos * 2 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn residual_and_stem_shortcuts() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let res = ResidualBlock::new(&mut Builder::new(&mut store, 1), "res", 3, 6, 2).unwrap();
    let x = random(&[2, 8, 8, 3], &mut rng);
    assert_eq!(eval(&store, Mode::Train, &x, |c, v| res.forward(c, v)).shape(), &[2, 4, 4, 6]);
    // main path forced to zero via its last normalization
    *store.value_mut(res.bn2.gamma) = Tensor::zeros(vec![6]);
    for mode in [Mode::Train, Mode::Eval] {
        let y = eval(&store, mode, &x, |c, v| res.forward(c, v));
        let s = eval(&store, mode, &x, |c, v| res.shortcut_path(c, v));
        assert_eq!(y.data(), s.data());
    }

    let mut store = ParamStore::new();
    let stem = StemBlock::new(&mut Builder::new(&mut store, 2), "stem", 1, 4).unwrap();
    let x = random(&[2, 6, 6, 1], &mut rng);
    assert_eq!(eval(&store, Mode::Train, &x, |c, v| stem.forward(c, v)).shape(), &[2, 6, 6, 4]);
    *store.value_mut(stem.conv2.kernel) = Tensor::zeros(vec![3, 3, 4, 4]);
    let y = eval(&store, Mode::Train, &x, |c, v| stem.forward(c, v));
    let s = eval(&store, Mode::Train, &x, |c, v| stem.shortcut.forward(c, v));
    assert_eq!(y.data(), s.data());
}

#[test]
fn lstm_frozen_state_and_single_step_bilstm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let l = Lstm::new(&mut Builder::new(&mut store, 1), "l", 2, 3);
    *store.value_mut(l.kernel) = Tensor::zeros(vec![2, 12]);
    *store.value_mut(l.recurrent) = Tensor::zeros(vec![3, 12]);
    let mut bias = vec![0.0; 12];
    bias[..3].fill(-800.0); // input gate 0
    bias[3..6].fill(800.0); // forget gate 1
    bias[9..].fill(800.0); // output gate 1
    *store.value_mut(l.bias) = Tensor::new(vec![12], bias).unwrap();
    let mut ctx = Ctx::new(&store, Mode::Eval, 0);
    let c0 = ctx.tape.constant(Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap());
    let mut h = ctx.tape.constant(Tensor::zeros(vec![1, 3]));
    let mut c = c0;
    for _ in 0..5 {
        let xt = ctx.tape.constant(random(&[1, 2], &mut rng));
        (h, c) = l.step(&mut ctx, xt, h, c).unwrap();
    }
    assert_eq!(ctx.tape.value(c).data(), ctx.tape.value(c0).data());
    let _ = h;

    let mut store = ParamStore::new();
    let bi = BiLstm::new(&mut Builder::new(&mut store, 2), "bi", 2, 3);
    let x = random(&[2, 1, 2], &mut rng);
    let y = eval(&store, Mode::Eval, &x, |c, v| bi.forward(c, v));
    let manual = eval(&store, Mode::Eval, &x, |ctx, v| {
        let xt = ctx.tape.reshape(v, &[2, 2])?;
        let z = ctx.tape.constant(Tensor::zeros(vec![2, 3]));
        let (f, _) = bi.forward_cell.step(ctx, xt, z, z)?;
        let (b, _) = bi.backward_cell.step(ctx, xt, z, z)?;
        ctx.tape.concat(&[f, b], 1)
    });
    assert_eq!(y.data(), manual.data());
    assert_eq!(y.shape(), &[2, 6]);

    let empty_ok = Tensor::<f64>::zeros(vec![1, 1, 2]);
    assert!(eval(&store, Mode::Eval, &empty_ok, |c, v| bi.forward(c, v)).is_finite());
}

#[test]
fn ltc_analytic_limits() {
    let mut store = ParamStore::new();
    let l = LtcCell::new(&mut Builder::new(&mut store, 1), "ltc", 2, 3);
    let h0 = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
    let step = |store: &ParamStore<f64>, h: &Tensor<f64>| {
        let mut ctx = Ctx::new(store, Mode::Eval, 0);
        let hv = ctx.tape.constant(h.clone());
        let xv = ctx.tape.constant(x.clone());
        let y = l.step(&mut ctx, xv, hv).unwrap();
        ctx.tape.value(y).clone()
    };
    // g ≡ 0: pure decay h / (1 + Δt/τ)^n over n substeps of Δt = 1/n
    *store.value_mut(l.bias) = Tensor::full(vec![3], -800.0);
    *store.value_mut(l.tau_raw) = Tensor::new(vec![3], vec![0.0, 1.0, 3.0]).unwrap();
    let y = step(&store, &h0);
    let n = LTC_UNFOLDS as f64;
    for i in 0..3 {
        let tau = (1.0 + store.value(l.tau_raw).data()[i].exp()).ln();
        let want = h0.data()[i] / (1.0 + 1.0 / (n * tau)).powi(LTC_UNFOLDS as i32);
        assert!((y.data()[i] - want).abs() < 1e-12);
    }
    // g ≡ 1, τ → ∞, h = A: fixed point
    *store.value_mut(l.bias) = Tensor::full(vec![3], 800.0);
    *store.value_mut(l.tau_raw) = Tensor::full(vec![3], 1e15);
    let a = store.value(l.leak_target).clone();
    let h = a.clone().reshape(vec![1, 3]).unwrap();
    assert_close(step(&store, &h).data(), a.data(), 1e-12);
}

/// Cox–de Boor recursion on the extended knot vector, independent of the
/// triangular evaluation used by the layer.
fn cox_de_boor(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
    if k == 0 {
        return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let left = (x - knots[i]) / (knots[i + k] - knots[i]) * cox_de_boor(knots, i, k - 1, x);
    let right = (knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1]) * cox_de_boor(knots, i + 1, k - 1, x);
    left + right
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[test]
fn kan_matches_per_edge_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let kan = DenseKan::new(&mut Builder::new(&mut store, 1), "kan", 4, 3).unwrap();
    *store.value_mut(kan.spline_coeffs) = random(&[4 * 8, 3], &mut rng);
    let x = random(&[5, 4], &mut rng).map(|v| 0.999 * v);
    let y = eval(&store, Mode::Eval, &x, |c, v| kan.forward(c, v));
    let knots = kan.grid.knots();
    let w = store.value(kan.base_weight).clone();
    let coef = store.value(kan.spline_coeffs).clone();
    for r in 0..5 {
        for j in 0..3 {
            let mut want = 0.0;
            for i in 0..4 {
                let xi = x.get(&[r, i]);
                let spline: f64 = (0..8).map(|k| coef.get(&[i * 8 + k, j]) * cox_de_boor(&knots, k, 3, xi)).sum();
                want += w.get(&[i, j]) * silu(xi) + spline;
            }
            assert!((y.get(&[r, j]) - want).abs() < 1e-6);
        }
    }

    *store.value_mut(kan.spline_coeffs) = Tensor::zeros(vec![32, 3]);
    let y = eval(&store, Mode::Eval, &x, |c, v| kan.forward(c, v));
    for r in 0..5 {
        for j in 0..3 {
            let want: f64 = (0..4).map(|i| w.get(&[i, j]) * silu(x.get(&[r, i]))).sum();
            assert!((y.get(&[r, j]) - want).abs() < 1e-12);
        }
    }

    // symmetric coefficients c_k = −c_{7−k}: the spline vanishes at 0
    let sym: Vec<f64> = (0..32 * 3)
        .map(|idx| {
            let k = (idx / 3) % 8;
            let v = [0.7, -0.3, 1.1, 0.4];
            if k < 4 { v[k] } else { -v[7 - k] }
        })
        .collect();
    *store.value_mut(kan.spline_coeffs) = Tensor::new(vec![32, 3], sym).unwrap();
    let zero = Tensor::zeros(vec![1, 4]);
    assert!(eval(&store, Mode::Eval, &zero, |c, v| kan.forward(c, v)).data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn bspline_partition_of_unity_and_knots() {
    let grid = BsplineGrid::new(KAN_GRID_SIZE, KAN_ORDER, -1.0, 1.0).unwrap();
    let knots = grid.knots();
    assert_eq!(knots.len(), KAN_GRID_SIZE + 2 * KAN_ORDER + 1);
    assert!(knots.windows(2).all(|w| w[1] > w[0]));
    for i in 0..=2000 {
        let x = -1.0 + 2.0 * i as f64 / 2000.0;
        let (_, vals, _) = grid.local(x);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn parameter_counts_match_formulas() {
    let mut store = ParamStore::<f32>::new();
    let mut b = Builder::new(&mut store, 0);
    Dense::new(&mut b, "d", 7, 5, Activation::Relu);
    Conv1d::new(&mut b, "c1", 3, 4, 3).unwrap();
    Conv2d::new(&mut b, "c2", 3, 4, (3, 3), 1, 2, true).unwrap();
    BatchNorm::new(&mut b, "bn", 6);
    SeBlock::new(&mut b, "se", 12, 8);
    Aspp::new(&mut b, "aspp", 4, 6, &[1, 6, 12, 18], (16, 16)).unwrap();
    ResidualBlock::new(&mut b, "res", 4, 8, 2).unwrap();
    StemBlock::new(&mut b, "stem", 1, 4).unwrap();
    BiLstm::new(&mut b, "bi", 5, 6);
    LtcCell::new(&mut b, "ltc", 5, 6);
    DenseKan::new(&mut b, "kan", 10, 7).unwrap();
    let want = [
        ("d.", Dense::param_count(7, 5)),
        ("c1.", Conv1d::param_count(3, 4, 3)),
        ("c2.", Conv2d::param_count(3, 4, (3, 3), true)),
        ("bn.", BatchNorm::param_count(6)),
        ("se.", SeBlock::param_count(12, 8)),
        ("aspp.", Aspp::param_count(4, 6, 4)),
        ("res.", ResidualBlock::param_count(4, 8, 2)),
        ("stem.", StemBlock::param_count(1, 4)),
        ("bi.", BiLstm::param_count(5, 6)),
        ("ltc.", LtcCell::param_count(5, 6)),
        ("kan.", DenseKan::param_count(10, 7)),
    ];
    for (prefix, n) in want {
        assert_eq!(store.trainable_count_with_prefix(prefix), n, "{prefix}");
    }
    assert_eq!(DenseKan::param_count(10, 7), 7 * 10 * 9);
    assert_eq!(SeBlock::param_count(12, 8), 12 * 2 + 2 + 2 * 12 + 12);
}

#[test]
fn every_layer_passes_gradient_check() {
    let checks = check_all_layers(42).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for c in &checks {
        seen.insert(c.layer.split('(').next().unwrap().to_string());
        let err = c.report.max_rel_err();
        assert!(err <= 1e-4, "{}: {err:e} ({:?})", c.layer, c.report.entries);
    }
    assert_eq!(seen.len(), LAYER_KINDS.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ltc_state_stays_bounded(seed in 0u64..10_000, steps in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = LtcCell::new(&mut Builder::new(&mut store, seed), "ltc", 3, 4);
        *store.value_mut(l.leak_target) = random(&[4], &mut rng).map(|v| 3.0 * v);
        *store.value_mut(l.bias) = random(&[4], &mut rng).map(|v| 4.0 * v);
        let a_max = store.value(l.leak_target).max_abs();
        let x = random(&[2, steps, 3], &mut rng).map(|v| 5.0 * v);
        let h = eval(&store, Mode::Eval, &x, |c, v| l.forward(c, v));
        prop_assert!(h.max_abs() <= a_max + 1e-12);
    }

    #[test]
    fn dropout_eval_is_bitwise_identity(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 7], &mut rng);
        let store = ParamStore::new();
        let y = eval(&store, Mode::Eval, &x, |c, v| Dropout::new(0.2).forward(c, v));
        prop_assert_eq!(y.data(), x.data());
    }
}
