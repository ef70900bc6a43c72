use crate::autodiff::{Ctx, Float, Var};
use crate::error::Result;

use super::{global_avg_pool, Activation, BatchNorm, Builder, Conv2d, Dense};

/// Squeeze-and-excitation: per-channel gates from globally pooled
/// statistics, `x ⊙ sigmoid(dense(relu(dense(gap(x)))))`.
pub struct SeBlock {
    pub name: String,
    pub squeeze: Dense,
    pub excite: Dense,
    pub channels: usize,
}

impl SeBlock {
    pub fn hidden(channels: usize, reduction: usize) -> usize {
        channels.div_ceil(reduction).max(1)
    }

    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = Self::hidden(channels, reduction);
        SeBlock {
            name: name.to_string(),
            squeeze: Dense::new(b, &format!("{name}.squeeze"), channels, hidden, Activation::Relu),
            excite: Dense::new(b, &format!("{name}.excite"), hidden, channels, Activation::Sigmoid),
            channels,
        }
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        let h = Self::hidden(channels, reduction);
        Dense::param_count(channels, h) + Dense::param_count(h, channels)
    }

    /// Channel gates `(batch, channels)` for an `(batch, h, w, channels)` map.
    pub fn gates<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let pooled = global_avg_pool(ctx, x)?;
        let hidden = self.squeeze.forward(ctx, pooled)?;
        self.excite.forward(ctx, hidden)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let n = ctx.tape.shape(x)[0];
        let gates = self.gates(ctx, x)?;
        let gates = ctx.tape.reshape(gates, &[n, 1, 1, self.channels])?;
        let y = ctx.tape.mul(x, gates)?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// Atrous spatial pyramid pooling: parallel dilated 3×3 convolutions, each
/// followed by batch norm and ReLU, summed and projected by a 1×1
/// convolution.
pub struct Aspp {
    pub name: String,
    pub branches: Vec<(Conv2d, BatchNorm)>,
    pub rates: Vec<usize>,
    pub project: Conv2d,
}

impl Aspp {
    /// Dilation rates larger than the feature map would only ever touch
    /// padding; they are clipped to `max(1, min(h, w) - 1)`.
    pub fn effective_rates(rates: &[usize], map: (usize, usize)) -> Vec<usize> {
        let limit = map.0.min(map.1).saturating_sub(1).max(1);
        rates.iter().map(|&r| r.clamp(1, limit)).collect()
    }

    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        filters: usize,
        rates: &[usize],
        map: (usize, usize),
    ) -> Result<Self> {
        let effective = Self::effective_rates(rates, map);
        if effective != rates {
            log::warn!(
                "{name}: dilation rates {rates:?} exceed the {}×{} feature map; using {effective:?}",
                map.0,
                map.1
            );
        }
        let branches = effective
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let conv = Conv2d::new(b, &format!("{name}.branch{i}.conv"), c_in, filters, (3, 3), 1, r, false)?;
                let bn = BatchNorm::new(b, &format!("{name}.branch{i}.bn"), filters);
                Ok((conv, bn))
            })
            .collect::<Result<_>>()?;
        Ok(Aspp {
            name: name.to_string(),
            branches,
            rates: effective,
            project: Conv2d::new(b, &format!("{name}.project"), filters, filters, (1, 1), 1, 1, false)?,
        })
    }

    pub fn param_count(c_in: usize, filters: usize, n_rates: usize) -> usize {
        n_rates * (Conv2d::param_count(c_in, filters, (3, 3), false) + BatchNorm::param_count(filters))
            + Conv2d::param_count(filters, filters, (1, 1), false)
    }

    pub fn branch<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var, i: usize) -> Result<Var> {
        let (conv, bn) = &self.branches[i];
        let y = conv.forward(ctx, x)?;
        let y = bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut sum = self.branch(ctx, x, 0)?;
        for i in 1..self.branches.len() {
            let y = self.branch(ctx, x, i)?;
            sum = ctx.tape.add(sum, y)?;
        }
        let y = self.project.forward(ctx, sum)?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// Two conv(3×3)–BN–ReLU stages (the first strided) plus a 1×1 projection
/// shortcut when the shape changes; the output is their sum. Convolutions
/// that feed a batch norm carry no bias (it would be cancelled).
pub struct ResidualBlock {
    pub name: String,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, c_in: usize, filters: usize, stride: usize) -> Result<Self> {
        let needs_projection = stride != 1 || c_in != filters;
        Ok(ResidualBlock {
            name: name.to_string(),
            conv1: Conv2d::new(b, &format!("{name}.conv1"), c_in, filters, (3, 3), stride, 1, false)?,
            bn1: BatchNorm::new(b, &format!("{name}.bn1"), filters),
            conv2: Conv2d::new(b, &format!("{name}.conv2"), filters, filters, (3, 3), 1, 1, false)?,
            bn2: BatchNorm::new(b, &format!("{name}.bn2"), filters),
            shortcut: if needs_projection {
                Some(Conv2d::new(b, &format!("{name}.shortcut"), c_in, filters, (1, 1), stride, 1, true)?)
            } else {
                None
            },
        })
    }

    pub fn param_count(c_in: usize, filters: usize, stride: usize) -> usize {
        let shortcut = if stride != 1 || c_in != filters {
            Conv2d::param_count(c_in, filters, (1, 1), true)
        } else {
            0
        };
        Conv2d::param_count(c_in, filters, (3, 3), false)
            + Conv2d::param_count(filters, filters, (3, 3), false)
            + 2 * BatchNorm::param_count(filters)
            + shortcut
    }

    pub fn main_path<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }

    pub fn shortcut_path<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.shortcut {
            Some(conv) => conv.forward(ctx, x),
            None => Ok(x),
        }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let main = self.main_path(ctx, x)?;
        let skip = self.shortcut_path(ctx, x)?;
        let y = ctx.tape.add(main, skip)?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// Entry block: conv–BN–ReLU–conv at stride 1 plus a 1×1 shortcut.
pub struct StemBlock {
    pub name: String,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub shortcut: Conv2d,
}

impl StemBlock {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, c_in: usize, filters: usize) -> Result<Self> {
        Ok(StemBlock {
            name: name.to_string(),
            conv1: Conv2d::new(b, &format!("{name}.conv1"), c_in, filters, (3, 3), 1, 1, false)?,
            bn1: BatchNorm::new(b, &format!("{name}.bn1"), filters),
            conv2: Conv2d::new(b, &format!("{name}.conv2"), filters, filters, (3, 3), 1, 1, true)?,
            shortcut: Conv2d::new(b, &format!("{name}.shortcut"), c_in, filters, (1, 1), 1, 1, true)?,
        })
    }

    pub fn param_count(c_in: usize, filters: usize) -> usize {
        Conv2d::param_count(c_in, filters, (3, 3), false)
            + BatchNorm::param_count(filters)
            + Conv2d::param_count(filters, filters, (3, 3), true)
            + Conv2d::param_count(c_in, filters, (1, 1), true)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        let main = self.conv2.forward(ctx, y)?;
        let skip = self.shortcut.forward(ctx, x)?;
        let y = ctx.tape.add(main, skip)?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}
