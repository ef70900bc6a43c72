//! Layers built on the tape: standard primitives plus squeeze-excitation,
//! atrous pyramid pooling, residual/stem blocks, LSTM/BiLSTM, the liquid
//! time-constant cell and the Kolmogorov–Arnold dense layer.
//!
//! Every layer registers its parameters in a [`ParamStore`] at build time
//! (names are `<layer name>.<param>`) and reads them back through a
//! [`Ctx`] during the forward pass. Feature maps are channels-last.

mod blocks;
pub mod check;
mod kan;
mod recurrent;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Float, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub use blocks::{Aspp, ResidualBlock, SeBlock, StemBlock};
pub use kan::{DenseKan, KAN_GRID_SIZE, KAN_ORDER};
pub use recurrent::{BiLstm, Lstm, LtcCell, LTC_UNFOLDS};

/// Registers parameters with seeded initial values.
pub struct Builder<'a, T: Float> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.random_range(-bound..=bound))).collect();
        self.store
            .add(name, Tensor::from_parts(shape.to_vec(), data), ParamKind::Trainable)
    }

    /// Glorot (Xavier) uniform initialization.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, kind: ParamKind) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), T::of(value)), kind)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.constant(name, shape, 0.0, ParamKind::Trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
    Silu,
    Softmax,
}

impl Activation {
    pub fn apply<T: Float>(self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Linear => x,
            Activation::Relu => ctx.tape.relu(x),
            Activation::Sigmoid => ctx.tape.sigmoid(x),
            Activation::Tanh => ctx.tape.tanh(x),
            Activation::Silu => ctx.tape.silu(x),
            Activation::Softmax => ctx.tape.softmax(x)?,
        })
    }
}

/// Fully connected layer on `(batch, in)` inputs.
pub struct Dense {
    pub name: String,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Activation,
    pub units: usize,
}

impl Dense {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, input: usize, units: usize, activation: Activation) -> Self {
        Dense {
            name: name.to_string(),
            kernel: b.glorot(&format!("{name}.kernel"), &[input, units], input, units),
            bias: Some(b.zeros(&format!("{name}.bias"), &[units])),
            activation,
            units,
        }
    }

    pub fn param_count(input: usize, units: usize) -> usize {
        input * units + units
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.kernel);
        let mut y = ctx.tape.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = ctx.param(b);
            y = ctx.tape.add(y, b)?;
        }
        let y = self.activation.apply(ctx, y)?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// 2-D convolution with "same" padding on `(batch, h, w, c)` maps.
pub struct Conv2d {
    pub name: String,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub filters: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self> {
        if stride == 0 || dilation == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::InvalidArgument(format!(
                "{name}: kernel, stride and dilation must be positive"
            )));
        }
        let (kh, kw) = kernel;
        let fan_in = kh * kw * c_in;
        let fan_out = kh * kw * filters;
        Ok(Conv2d {
            name: name.to_string(),
            kernel: b.glorot(&format!("{name}.kernel"), &[kh, kw, c_in, filters], fan_in, fan_out),
            bias: bias.then(|| b.zeros(&format!("{name}.bias"), &[filters])),
            stride: (stride, stride),
            dilation: (dilation, dilation),
            filters,
        })
    }

    pub fn param_count(c_in: usize, filters: usize, kernel: (usize, usize), bias: bool) -> usize {
        kernel.0 * kernel.1 * c_in * filters + if bias { filters } else { 0 }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.kernel);
        let mut y = ctx.tape.conv2d(x, w, self.stride, self.dilation)?;
        if let Some(b) = self.bias {
            let b = ctx.param(b);
            y = ctx.tape.add(y, b)?;
        }
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// 1-D convolution ("same" padding, stride 1) on `(batch, time, c)`.
pub struct Conv1d {
    inner: Conv2d,
}

impl Conv1d {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, c_in: usize, filters: usize, kernel: usize) -> Result<Self> {
        Ok(Conv1d {
            inner: Conv2d::new(b, name, c_in, filters, (1, kernel), 1, 1, true)?,
        })
    }

    pub fn param_count(c_in: usize, filters: usize, kernel: usize) -> usize {
        kernel * c_in * filters + filters
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid_shape("conv1d", &s, "expected (batch, time, channels)"));
        }
        let x4 = ctx.tape.reshape(x, &[s[0], 1, s[1], s[2]])?;
        let w = ctx.param(self.inner.kernel);
        let mut y = ctx.tape.conv2d(x4, w, (1, 1), (1, 1))?;
        if let Some(b) = self.inner.bias {
            let b = ctx.param(b);
            y = ctx.tape.add(y, b)?;
        }
        let y = ctx.tape.reshape(y, &[s[0], s[1], self.inner.filters])?;
        ctx.record(&self.inner.name, y);
        Ok(y)
    }

    pub fn kernel(&self) -> ParamId {
        self.inner.kernel
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.inner.bias
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Batch normalization over the last axis. Training mode normalizes with
/// batch statistics and queues running-average updates; evaluation mode
/// uses the running averages.
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: b.constant(&format!("{name}.gamma"), &[channels], 1.0, ParamKind::Trainable),
            beta: b.zeros(&format!("{name}.beta"), &[channels]),
            running_mean: b.constant(&format!("{name}.running_mean"), &[channels], 0.0, ParamKind::Buffer),
            running_var: b.constant(&format!("{name}.running_var"), &[channels], 1.0, ParamKind::Buffer),
        }
    }

    /// Trainable scalars (running statistics excluded).
    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let y = if ctx.training() {
            let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, T::of(BN_EPSILON))?;
            let m = T::of(BN_MOMENTUM);
            let blend = |old: &Tensor<T>, new: &[T]| {
                Tensor::from_parts(
                    old.shape().to_vec(),
                    old.data().iter().zip(new).map(|(&o, &n)| m * o + (T::one() - m) * n).collect(),
                )
            };
            let store = ctx.store();
            let mean = blend(store.value(self.running_mean), &stats.mean);
            let var = blend(store.value(self.running_var), &stats.var);
            ctx.push_update(self.running_mean, mean);
            ctx.push_update(self.running_var, var);
            y
        } else {
            let store = ctx.store();
            let mean = store.value(self.running_mean).clone();
            let inv_std = store
                .value(self.running_var)
                .map(|v| T::one() / (v + T::of(BN_EPSILON)).sqrt());
            let mean = ctx.tape.constant(mean);
            let inv_std = ctx.tape.constant(inv_std);
            let centred = ctx.tape.sub(x, mean)?;
            let scaled = ctx.tape.mul(centred, inv_std)?;
            let scaled = ctx.tape.mul(scaled, gamma)?;
            ctx.tape.add(scaled, beta)?
        };
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// Inverted dropout: active only in training mode, identity otherwise.
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Dropout { rate }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        if !ctx.training() || self.rate == 0.0 {
            return Ok(x);
        }
        let shape = ctx.tape.shape(x).to_vec();
        let keep = 1.0 - self.rate;
        let scale = T::of(1.0 / keep);
        let n = shape.iter().product();
        let rng = ctx.rng();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let mask = ctx.tape.constant(Tensor::from_parts(shape, mask));
        ctx.tape.mul(x, mask)
    }
}

/// Max pooling with window and stride 2 along the time axis of
/// `(batch, time, c)`; an odd trailing sample is dropped.
pub fn max_pool<T: Float>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    ctx.tape.max_pool1d(x)
}

/// Mean over every axis between batch and channels.
pub fn global_avg_pool<T: Float>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    if s.len() < 3 {
        return Err(Error::invalid_shape("global_avg_pool", &s, "expected (batch, ..., channels)"));
    }
    let inner: usize = s[1..s.len() - 1].iter().product();
    let flat = ctx.tape.reshape(x, &[s[0], inner, s[s.len() - 1]])?;
    ctx.tape.mean_axis(flat, 1)
}
