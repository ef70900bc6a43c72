//! Finite-difference gradient checks for every layer kind, on small random
//! shapes with fixed seeds (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, Mode, ParamStore, Tensor};
use crate::error::Result;

use super::*;

/// Probes per tensor; small layers are checked exhaustively.
const MAX_PROBES: usize = 48;

pub struct LayerCheck {
    pub layer: &'static str,
    pub report: GradCheckReport,
}

fn input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Runs the check for one layer kind. Layers with batch norm are checked in
/// training mode (batch statistics) and again in evaluation mode.
pub fn check_layer(layer: &'static str, seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let mut out = Vec::new();
    let mut run = |store: &mut ParamStore<f64>,
                   name: &'static str,
                   x: &Tensor<f64>,
                   mode: Mode,
                   f: &dyn Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>|
     -> Result<()> {
        let report = grad_check(store, x, mode, MAX_PROBES, f)?;
        out.push(LayerCheck { layer: name, report });
        Ok(())
    };
    let param_seed = rng.random();
    match layer {
        "dense" => {
            let l = Dense::new(&mut Builder::new(&mut store, param_seed), "dense", 5, 4, Activation::Tanh);
            let x = input(&[3, 5], &mut rng);
            run(&mut store, "dense", &x, Mode::Train, &|c, x| l.forward(c, x))?;
        }
        "conv1d" => {
            let l = Conv1d::new(&mut Builder::new(&mut store, param_seed), "conv1d", 2, 3, 3)?;
            let x = input(&[2, 9, 2], &mut rng);
            run(&mut store, "conv1d", &x, Mode::Train, &|c, x| l.forward(c, x))?;
        }
        "conv2d" => {
            let mut b = Builder::new(&mut store, param_seed);
            let plain = Conv2d::new(&mut b, "conv2d", 2, 3, (3, 3), 2, 1, true)?;
            let dilated = Conv2d::new(&mut b, "conv2d_dilated", 3, 2, (3, 3), 1, 2, true)?;
            let x = input(&[2, 7, 6, 2], &mut rng);
            run(&mut store, "conv2d", &x, Mode::Train, &|c, x| {
                let y = plain.forward(c, x)?;
                dilated.forward(c, y)
            })?;
        }
        "batch_norm" => {
            let l = BatchNorm::new(&mut Builder::new(&mut store, param_seed), "bn", 3);
            // non-trivial running statistics for the evaluation-mode check
            *store.value_mut(l.running_mean) = input(&[3], &mut rng);
            *store.value_mut(l.running_var) = Tensor::new(vec![3], vec![0.5, 1.5, 2.0])?;
            *store.value_mut(l.gamma) = input(&[3], &mut rng);
            let x = input(&[4, 5, 3], &mut rng);
            run(&mut store, "batch_norm", &x, Mode::Train, &|c, x| l.forward(c, x))?;
            run(&mut store, "batch_norm(eval)", &x, Mode::Eval, &|c, x| l.forward(c, x))?;
        }
        "max_pool" => {
            let x = input(&[2, 9, 3], &mut rng);
            run(&mut store, "max_pool", &x, Mode::Train, &|c, x| max_pool(c, x))?;
        }
        "lstm" => {
            let l = Lstm::new(&mut Builder::new(&mut store, param_seed), "lstm", 3, 4);
            let x = input(&[2, 6, 3], &mut rng);
            run(&mut store, "lstm", &x, Mode::Train, &|c, x| l.forward(c, x, false))?;
        }
        "bilstm" => {
            let l = BiLstm::new(&mut Builder::new(&mut store, param_seed), "bilstm", 3, 3);
            let x = input(&[2, 6, 3], &mut rng);
            run(&mut store, "bilstm", &x, Mode::Train, &|c, x| l.forward(c, x))?;
        }
        "se" => {
            let l = SeBlock::new(&mut Builder::new(&mut store, param_seed), "se", 8, 8);
            let x = input(&[2, 3, 4, 8], &mut rng);
            run(&mut store, "se", &x, Mode::Train, &|c, x| l.forward(c, x))?;
        }
        "aspp" => {
            let l = Aspp::new(&mut Builder::new(&mut store, param_seed), "aspp", 2, 3, &[1, 2, 3], (6, 6))?;
            let x = input(&[2, 6, 6, 2], &mut rng);
            run(&mut store, "aspp", &x, Mode::Train, &|c, x| l.forward(c, x))?;
            run(&mut store, "aspp(eval)", &x, Mode::Eval, &|c, x| l.forward(c, x))?;
        }
        "residual" => {
            let l = ResidualBlock::new(&mut Builder::new(&mut store, param_seed), "res", 2, 4, 2)?;
            let x = input(&[2, 6, 6, 2], &mut rng);
            run(&mut store, "residual", &x, Mode::Train, &|c, x| l.forward(c, x))?;
            run(&mut store, "residual(eval)", &x, Mode::Eval, &|c, x| l.forward(c, x))?;
        }
        "stem" => {
            let l = StemBlock::new(&mut Builder::new(&mut store, param_seed), "stem", 1, 3)?;
            let x = input(&[2, 6, 6, 1], &mut rng);
            run(&mut store, "stem", &x, Mode::Train, &|c, x| l.forward(c, x))?;
            run(&mut store, "stem(eval)", &x, Mode::Eval, &|c, x| l.forward(c, x))?;
        }
        "ltc" => {
            let l = LtcCell::new(&mut Builder::new(&mut store, param_seed), "ltc", 3, 4);
            let x = input(&[2, 5, 3], &mut rng);
            run(&mut store, "ltc", &x, Mode::Train, &|c, x| l.forward(c, x))?;
        }
        "kan" => {
            let l = DenseKan::new(&mut Builder::new(&mut store, param_seed), "kan", 4, 3)?;
            // slightly wider than the grid to exercise the boundary pieces
            let x = input(&[3, 4], &mut rng).map(|v| 1.3 * v);
            run(&mut store, "kan", &x, Mode::Train, &|c, x| l.forward(c, x))?;
        }
        other => {
            return Err(crate::Error::InvalidArgument(format!(
                "unknown layer `{other}` (expected one of {})",
                LAYER_KINDS.join(", ")
            )))
        }
    }
    Ok(out)
}

pub const LAYER_KINDS: [&str; 13] = [
    "dense",
    "conv1d",
    "conv2d",
    "batch_norm",
    "max_pool",
    "lstm",
    "bilstm",
    "se",
    "aspp",
    "residual",
    "stem",
    "ltc",
    "kan",
];

/// Checks every layer kind.
pub fn check_all_layers(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut all = Vec::new();
    for (i, kind) in LAYER_KINDS.iter().enumerate() {
        all.extend(check_layer(kind, seed.wrapping_add(i as u64))?);
    }
    Ok(all)
}
