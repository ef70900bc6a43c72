use crate::autodiff::{Ctx, Float, ParamId, ParamKind, Tensor, Var};
use crate::error::{Error, Result};

use super::Builder;

fn check_sequence(op: &'static str, shape: &[usize], input: usize) -> Result<()> {
    if shape.len() != 3 || shape[2] != input {
        return Err(Error::invalid_shape(op, shape, format!("expected (batch, steps, {input})")));
    }
    if shape[1] == 0 {
        return Err(Error::invalid_shape(op, shape, "empty sequence"));
    }
    Ok(())
}

/// Input at step `t` of a `(batch, steps, features)` sequence.
fn step_input<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, t: usize) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    let xt = ctx.tape.slice(x, 1, t, 1)?;
    ctx.tape.reshape(xt, &[s[0], s[2]])
}

/// LSTM with gate layout `[input, forget, cell, output]` along the last
/// axis of the kernels; the forget-gate bias starts at 1.
pub struct Lstm {
    pub name: String,
    pub kernel: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub units: usize,
}

impl Lstm {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, input: usize, units: usize) -> Self {
        let kernel = b.glorot(&format!("{name}.kernel"), &[input, 4 * units], input, 4 * units);
        let recurrent = b.glorot(&format!("{name}.recurrent"), &[units, 4 * units], units, 4 * units);
        let bias_values: Vec<T> = (0..4 * units)
            .map(|i| if (units..2 * units).contains(&i) { T::one() } else { T::zero() })
            .collect();
        let bias = b.store.add(
            format!("{name}.bias"),
            Tensor::new(vec![4 * units], bias_values).expect("bias shape"),
            ParamKind::Trainable,
        );
        Lstm {
            name: name.to_string(),
            kernel,
            recurrent,
            bias,
            input,
            units,
        }
    }

    pub fn param_count(input: usize, units: usize) -> usize {
        4 * units * (input + units + 1)
    }

    /// One step: returns the new `(h, c)`.
    pub fn step<T: Float>(&self, ctx: &mut Ctx<'_, T>, x_t: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let u = self.units;
        let w = ctx.param(self.kernel);
        let r = ctx.param(self.recurrent);
        let b = ctx.param(self.bias);
        let zx = ctx.tape.matmul(x_t, w)?;
        let zh = ctx.tape.matmul(h, r)?;
        let z = ctx.tape.add(zx, zh)?;
        let z = ctx.tape.add(z, b)?;
        let zi = ctx.tape.slice(z, 1, 0, u)?;
        let zf = ctx.tape.slice(z, 1, u, u)?;
        let zg = ctx.tape.slice(z, 1, 2 * u, u)?;
        let zo = ctx.tape.slice(z, 1, 3 * u, u)?;
        let i = ctx.tape.sigmoid(zi);
        let f = ctx.tape.sigmoid(zf);
        let g = ctx.tape.tanh(zg);
        let o = ctx.tape.sigmoid(zo);
        let fc = ctx.tape.mul(f, c)?;
        let ig = ctx.tape.mul(i, g)?;
        let c_next = ctx.tape.add(fc, ig)?;
        let tc = ctx.tape.tanh(c_next);
        let h_next = ctx.tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Runs over `(batch, steps, input)` from zero state and returns the
    /// final hidden state `(batch, units)`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var, reverse: bool) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        check_sequence("lstm", &s, self.input)?;
        let mut h = ctx.tape.constant(Tensor::zeros(vec![s[0], self.units]));
        let mut c = h;
        for k in 0..s[1] {
            let t = if reverse { s[1] - 1 - k } else { k };
            let xt = step_input(ctx, x, t)?;
            (h, c) = self.step(ctx, xt, h, c)?;
        }
        Ok(h)
    }
}

/// Bidirectional LSTM returning `[final forward h, final backward h]`.
pub struct BiLstm {
    pub name: String,
    pub forward_cell: Lstm,
    pub backward_cell: Lstm,
}

impl BiLstm {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, input: usize, units: usize) -> Self {
        BiLstm {
            name: name.to_string(),
            forward_cell: Lstm::new(b, &format!("{name}.forward"), input, units),
            backward_cell: Lstm::new(b, &format!("{name}.backward"), input, units),
        }
    }

    pub fn param_count(input: usize, units: usize) -> usize {
        2 * Lstm::param_count(input, units)
    }

    pub fn output_width(&self) -> usize {
        2 * self.forward_cell.units
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let f = self.forward_cell.forward(ctx, x, false)?;
        let b = self.backward_cell.forward(ctx, x, true)?;
        let y = ctx.tape.concat(&[f, b], 1)?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// Liquid time-constant cell. The state follows
/// `dh/dt = −(1/τ + g)·h + g·A` with gate `g = sigmoid(W·x + U·h + b)` and
/// `τ = softplus(tau_raw)`, integrated by fused semi-implicit substeps
/// `h' = (h + Δt·g⊙A) / (1 + Δt·(1/τ + g))` with unit time per input.
pub struct LtcCell {
    pub name: String,
    pub kernel: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub tau_raw: ParamId,
    pub leak_target: ParamId,
    pub input: usize,
    pub units: usize,
}

/// ODE solver substeps per input step.
pub const LTC_UNFOLDS: usize = 6;
/// Time constants start near 64 steps and gates near 0.12, so the
/// initial cell integrates over the whole sequence instead of forgetting
/// all but the last few steps.
const TAU_RAW_INIT: f64 = 64.0;
const GATE_BIAS_INIT: f64 = -2.0;

impl LtcCell {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, input: usize, units: usize) -> Self {
        LtcCell {
            name: name.to_string(),
            kernel: b.glorot(&format!("{name}.kernel"), &[input, units], input, units),
            recurrent: b.glorot(&format!("{name}.recurrent"), &[units, units], units, units),
            bias: b.constant(&format!("{name}.bias"), &[units], GATE_BIAS_INIT, ParamKind::Trainable),
            tau_raw: b.constant(&format!("{name}.tau_raw"), &[units], TAU_RAW_INIT, ParamKind::Trainable),
            leak_target: b.uniform(&format!("{name}.leak_target"), &[units], 1.0),
            input,
            units,
        }
    }

    pub fn param_count(input: usize, units: usize) -> usize {
        units * (input + units + 3)
    }

    /// One input step: `LTC_UNFOLDS` fused substeps of `Δt = 1/LTC_UNFOLDS`,
    /// the gate re-evaluated from the current state each time.
    pub fn step<T: Float>(&self, ctx: &mut Ctx<'_, T>, x_t: Var, h: Var) -> Result<Var> {
        let w = ctx.param(self.kernel);
        let u = ctx.param(self.recurrent);
        let b = ctx.param(self.bias);
        let tau_raw = ctx.param(self.tau_raw);
        let a = ctx.param(self.leak_target);
        let dt = T::of(1.0 / LTC_UNFOLDS as f64);
        let zx = ctx.tape.matmul(x_t, w)?;
        let zx = ctx.tape.add(zx, b)?;
        let tau = ctx.tape.softplus(tau_raw);
        let inv_tau = ctx.tape.recip(tau);
        let mut h = h;
        for _ in 0..LTC_UNFOLDS {
            let zh = ctx.tape.matmul(h, u)?;
            let z = ctx.tape.add(zx, zh)?;
            let g = ctx.tape.sigmoid(z);
            let ga = ctx.tape.mul(g, a)?;
            let ga = ctx.tape.scale(ga, dt);
            let num = ctx.tape.add(h, ga)?;
            let den = ctx.tape.add(g, inv_tau)?;
            let den = ctx.tape.scale(den, dt);
            let den = ctx.tape.add_scalar(den, T::one());
            h = ctx.tape.div(num, den)?;
        }
        Ok(h)
    }

    /// Runs over `(batch, steps, input)` from zero state and returns the
    /// final state `(batch, units)`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        check_sequence("ltc", &s, self.input)?;
        let mut h = ctx.tape.constant(Tensor::zeros(vec![s[0], self.units]));
        for t in 0..s[1] {
            let xt = step_input(ctx, x, t)?;
            h = self.step(ctx, xt, h)?;
        }
        ctx.record(&self.name, h);
        Ok(h)
    }
}
