//! Central finite-difference verification of tape gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::params::{Ctx, Mode, ParamKind, ParamStore};
use super::tape::Var;
use super::tensor::Tensor;

/// Perturbation used for central differences.
pub const STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that gradients that are
/// zero on both sides compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of `Σ f(x) ⊙ R` (fixed random `R`) against
/// central differences, for the input and every trainable parameter.
///
/// At most `max_per_tensor` entries of each tensor are probed; the probe
/// positions are spread evenly. `f` must be deterministic for a fixed
/// context seed (dropout masks included).
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    max_per_tensor: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    const CTX_SEED: u64 = 0x5eed;
    let weights: std::cell::RefCell<Option<Tensor<f64>>> = std::cell::RefCell::new(None);
    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>, keep_grads: bool| -> Result<(f64, Option<_>)> {
        let mut ctx = Ctx::new(store, mode, CTX_SEED);
        let xv = ctx.tape.leaf(x.clone(), keep_grads);
        let out = f(&mut ctx, xv)?;
        let out_t = ctx.tape.value(out).clone();
        let mut w = weights.borrow_mut();
        let w = w.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            Tensor::from_parts(
                out_t.shape().to_vec(),
                (0..out_t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        });
        let wv = ctx.tape.constant(w.clone());
        let prod = ctx.tape.mul(out, wv)?;
        let loss = ctx.tape.sum(prod);
        let value = ctx.tape.value(loss).item();
        if !keep_grads {
            return Ok((value, None));
        }
        let mut grads = ctx.tape.backward(loss)?;
        let input_grad = grads.take(xv);
        let pgrads = ctx.param_grads(&mut grads);
        Ok((value, Some((input_grad, pgrads))))
    };

    let (_, grads) = eval(store, input, true)?;
    let (input_grad, pgrads) = grads.expect("gradients requested");
    let mut report = GradCheckReport::default();

    let probes = |n: usize| -> Vec<usize> {
        if n <= max_per_tensor {
            (0..n).collect()
        } else {
            (0..max_per_tensor).map(|i| i * n / max_per_tensor).collect()
        }
    };

    // input
    {
        let analytic = input_grad.unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut x = input.clone();
        let mut worst: f64 = 0.0;
        let idx = probes(x.numel());
        for &i in &idx {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + STEP;
            let plus = eval(store, &x, false)?.0;
            x.data_mut()[i] = orig - STEP;
            let minus = eval(store, &x, false)?.0;
            x.data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic.data()[i], (plus - minus) / (2.0 * STEP)));
        }
        report.entries.push(GradCheckEntry {
            name: "input".into(),
            checked: idx.len(),
            max_rel_err: worst,
        });
    }

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, p)| (id, p.name.clone(), p.value.numel()))
        .collect();
    for (id, name, n) in ids {
        let analytic = pgrads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()));
        let idx = probes(n);
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(store, input, false)?.0;
            store.value_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(store, input, false)?.0;
            store.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic.data()[i], (plus - minus) / (2.0 * STEP)));
        }
        report.entries.push(GradCheckEntry {
            name,
            checked: idx.len(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}
