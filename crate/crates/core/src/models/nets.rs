use std::collections::BTreeMap;

use crate::autodiff::{Ctx, Float, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool, max_pool, Activation, Aspp, BatchNorm, BiLstm, Builder, Conv1d, Dense, DenseKan, Dropout,
    LtcCell, ResidualBlock, SeBlock, StemBlock,
};

use super::{Dims, Forward, HeadKind, FIN_MIN_LEN, STAGE_CLASSES, TAP_FIN, TAP_N1, TFR_FREQ_BINS, TFR_WINDOW_LEN};

const FIN_KERNEL: usize = 3;

/// Convolution stack and LTC layer of the FIN; its output is the
/// `fin_features` tap.
pub struct FinTrunk {
    pub convs: Vec<(Conv1d, BatchNorm)>,
    pub ltc: LtcCell,
    pub input_len: usize,
}

impl FinTrunk {
    fn new<T: Float>(b: &mut Builder<'_, T>, dims: &Dims, input_len: usize) -> Result<Self> {
        if input_len < FIN_MIN_LEN {
            return Err(Error::TooShort {
                min: FIN_MIN_LEN,
                len: input_len,
            });
        }
        let mut c_in = 1;
        let mut convs = Vec::new();
        for (i, &f) in dims.fin_filters.iter().enumerate() {
            let conv = Conv1d::new(b, &format!("fin.conv{}", i + 1), c_in, f, FIN_KERNEL)?;
            let bn = BatchNorm::new(b, &format!("fin.bn{}", i + 1), f);
            convs.push((conv, bn));
            c_in = f;
        }
        Ok(FinTrunk {
            convs,
            ltc: LtcCell::new(b, "fin.ltc", c_in, dims.ltc_units),
            input_len,
        })
    }

    /// Signal `(batch, len)` to features `(batch, ltc_units)`.
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.input_len {
            return Err(Error::invalid_shape(
                "fin",
                &s,
                format!("expected (batch, {}) signals", self.input_len),
            ));
        }
        let mut y = ctx.tape.reshape(x, &[s[0], s[1], 1])?;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            y = conv.forward(ctx, y)?;
            y = ctx.tape.relu(y);
            y = bn.forward(ctx, y)?;
            y = max_pool(ctx, y)?;
            ctx.record(&format!("fin.pool{}", i + 1), y);
        }
        self.ltc.forward(ctx, y)
    }
}

/// Time steps left after the five halvings.
pub fn fin_time_steps(input_len: usize) -> usize {
    (0..5).fold(input_len, |n, _| n / 2)
}

struct FinHead {
    dense1: Dense,
    dense2: Dense,
    dropout: Dropout,
    heads: [(Dense, Dense); 2],
}

impl FinHead {
    fn new<T: Float>(b: &mut Builder<'_, T>, dims: &Dims) -> Self {
        let [d1, d2] = dims.fin_dense;
        let head = |b: &mut Builder<'_, T>, which: &str| {
            (
                Dense::new(b, &format!("fin.head.{which}.hidden"), d2, dims.fin_head, Activation::Relu),
                Dense::new(b, &format!("fin.head.{which}.out"), dims.fin_head, 1, Activation::Linear),
            )
        };
        FinHead {
            dense1: Dense::new(b, "fin.head.dense1", dims.ltc_units, d1, Activation::Relu),
            dense2: Dense::new(b, "fin.head.dense2", d1, d2, Activation::Relu),
            dropout: Dropout::new(dims.dropout),
            heads: [head(b, "kurtosis"), head(b, "skewness")],
        }
    }

    /// Features to `(batch, 2)`: column 0 kurtosis, column 1 skewness.
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.dense1.forward(ctx, x)?;
        let y = self.dropout.forward(ctx, y)?;
        let y = self.dense2.forward(ctx, y)?;
        let y = self.dropout.forward(ctx, y)?;
        let mut outs = Vec::with_capacity(2);
        for (hidden, out) in &self.heads {
            let h = hidden.forward(ctx, y)?;
            outs.push(out.forward(ctx, h)?);
        }
        ctx.tape.concat(&outs, 1)
    }
}

pub struct FinNet {
    pub trunk: FinTrunk,
    head: FinHead,
}

impl FinNet {
    pub(super) fn new<T: Float>(store: &mut ParamStore<T>, seed: u64, dims: &Dims, input_len: usize) -> Result<Self> {
        let mut b = Builder::new(store, seed);
        let trunk = FinTrunk::new(&mut b, dims, input_len)?;
        let head = FinHead::new(&mut b, dims);
        Ok(FinNet { trunk, head })
    }

    pub(super) fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Forward> {
        let features = self.trunk.forward(ctx, x)?;
        let output = self.head.forward(ctx, features)?;
        Ok(Forward {
            output,
            taps: BTreeMap::from([(TAP_FIN, features)]),
        })
    }
}

/// Shared per-window encoder plus the BiLSTM over windows; its output is
/// the `n1_features` tap.
pub struct N1Trunk {
    pub resize: (usize, usize),
    pub stem: StemBlock,
    pub stages: Vec<(ResidualBlock, SeBlock)>,
    pub aspp: Aspp,
    pub bilstm: BiLstm,
    pub windows: usize,
}

impl N1Trunk {
    fn new<T: Float>(b: &mut Builder<'_, T>, dims: &Dims, windows: usize) -> Result<Self> {
        if windows == 0 {
            return Err(Error::InvalidArgument("the N1 detector needs at least one window".into()));
        }
        let stem = StemBlock::new(b, "n1.stem", 1, dims.stem_filters)?;
        let mut c_in = dims.stem_filters;
        let mut map = dims.resize;
        let mut stages = Vec::new();
        for (i, &f) in dims.residual_filters.iter().enumerate() {
            let res = ResidualBlock::new(b, &format!("n1.res{}", i + 1), c_in, f, 2)?;
            let se = SeBlock::new(b, &format!("n1.se{}", i + 1), f, dims.se_reduction);
            stages.push((res, se));
            c_in = f;
            map = (map.0.div_ceil(2), map.1.div_ceil(2));
        }
        let aspp = Aspp::new(b, "n1.aspp", c_in, dims.aspp_filters, &dims.aspp_rates, map)?;
        let bilstm = BiLstm::new(b, "n1.bilstm", dims.aspp_filters, dims.lstm_units);
        Ok(N1Trunk {
            resize: dims.resize,
            stem,
            stages,
            aspp,
            bilstm,
            windows,
        })
    }

    /// Per-window pooled features `(batch, windows, aspp_filters)` for a
    /// stack `(batch, windows, h, w)`.
    pub fn encode_windows<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let accepted = [(TFR_FREQ_BINS, TFR_WINDOW_LEN), self.resize];
        if s.len() != 4 || s[1] != self.windows || !accepted.contains(&(s[2], s[3])) {
            return Err(Error::invalid_shape(
                "n1_detector",
                &s,
                format!(
                    "expected (batch, {}, {}, {}) or (batch, {}, {}, {})",
                    self.windows, TFR_FREQ_BINS, TFR_WINDOW_LEN, self.windows, self.resize.0, self.resize.1
                ),
            ));
        }
        let (n, w) = (s[0], s[1]);
        let mut y = ctx.tape.reshape(x, &[n * w, s[2], s[3], 1])?;
        if (s[2], s[3]) != self.resize {
            y = ctx.tape.resize_bilinear(y, self.resize.0, self.resize.1)?;
        }
        ctx.record("n1.resize", y);
        y = self.stem.forward(ctx, y)?;
        for (res, se) in &self.stages {
            y = res.forward(ctx, y)?;
            y = se.forward(ctx, y)?;
        }
        y = self.aspp.forward(ctx, y)?;
        let pooled = global_avg_pool(ctx, y)?;
        let c = ctx.tape.shape(pooled)[1];
        let seq = ctx.tape.reshape(pooled, &[n, w, c])?;
        ctx.record("n1.gap", seq);
        Ok(seq)
    }

    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let seq = self.encode_windows(ctx, x)?;
        self.bilstm.forward(ctx, seq)
    }
}

struct N1Head {
    dense1: Dense,
    dropout: Dropout,
    dense2: Dense,
    out: Dense,
}

impl N1Head {
    fn new<T: Float>(b: &mut Builder<'_, T>, dims: &Dims) -> Self {
        let [d1, d2] = dims.n1_dense;
        N1Head {
            dense1: Dense::new(b, "n1.head.dense1", 2 * dims.lstm_units, d1, Activation::Relu),
            dropout: Dropout::new(dims.dropout),
            dense2: Dense::new(b, "n1.head.dense2", d1, d2, Activation::Relu),
            out: Dense::new(b, "n1.head.out", d2, 2, Activation::Softmax),
        }
    }

    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.dense1.forward(ctx, x)?;
        let y = self.dropout.forward(ctx, y)?;
        let y = self.dense2.forward(ctx, y)?;
        self.out.forward(ctx, y)
    }
}

pub struct N1Net {
    pub trunk: N1Trunk,
    head: N1Head,
}

impl N1Net {
    pub(super) fn new<T: Float>(store: &mut ParamStore<T>, seed: u64, dims: &Dims, windows: usize) -> Result<Self> {
        let mut b = Builder::new(store, seed);
        let trunk = N1Trunk::new(&mut b, dims, windows)?;
        let head = N1Head::new(&mut b, dims);
        Ok(N1Net { trunk, head })
    }

    pub(super) fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Forward> {
        let features = self.trunk.forward(ctx, x)?;
        let output = self.head.forward(ctx, features)?;
        Ok(Forward {
            output,
            taps: BTreeMap::from([(TAP_N1, features)]),
        })
    }
}

/// Classification head of the fused model; ends in a softmax over the
/// five stages.
pub enum HeadNet {
    Kan(Vec<DenseKan>),
    Mlp(Vec<Dense>),
}

impl HeadNet {
    fn new<T: Float>(b: &mut Builder<'_, T>, kind: HeadKind, input: usize, hidden: [usize; 2]) -> Result<Self> {
        let widths = [input, hidden[0], hidden[1], STAGE_CLASSES];
        Ok(match kind {
            HeadKind::Kan => HeadNet::Kan(
                (0..3)
                    .map(|i| DenseKan::new(b, &format!("head.kan{}", i + 1), widths[i], widths[i + 1]))
                    .collect::<Result<_>>()?,
            ),
            HeadKind::Mlp => HeadNet::Mlp(
                (0..3)
                    .map(|i| {
                        let act = if i < 2 { Activation::Relu } else { Activation::Linear };
                        Dense::new(b, &format!("head.dense{}", i + 1), widths[i], widths[i + 1], act)
                    })
                    .collect(),
            ),
        })
    }

    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
        match self {
            HeadNet::Kan(layers) => {
                for l in layers {
                    x = l.forward(ctx, x)?;
                }
            }
            HeadNet::Mlp(layers) => {
                for l in layers {
                    x = l.forward(ctx, x)?;
                }
            }
        }
        let y = ctx.tape.softmax(x)?;
        ctx.record("head.softmax", y);
        Ok(y)
    }
}

pub struct FullNet {
    pub fin: FinTrunk,
    pub n1: N1Trunk,
    dropout: Dropout,
    pub head: HeadNet,
}

impl FullNet {
    pub(super) fn new<T: Float>(
        store: &mut ParamStore<T>,
        seed: u64,
        dims: &Dims,
        head: HeadKind,
        signal_len: usize,
        windows: usize,
    ) -> Result<Self> {
        let mut b = Builder::new(store, seed);
        let fin = FinTrunk::new(&mut b, dims, signal_len)?;
        let n1 = N1Trunk::new(&mut b, dims, windows)?;
        let head = HeadNet::new(&mut b, head, dims.ltc_units + 2 * dims.lstm_units, dims.head_hidden)?;
        Ok(FullNet {
            fin,
            n1,
            dropout: Dropout::new(dims.dropout),
            head,
        })
    }

    pub(super) fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, signal: Var, tfr: Var) -> Result<Forward> {
        let ns = ctx.tape.shape(signal)[0];
        let nt = ctx.tape.shape(tfr)[0];
        if ns != nt {
            return Err(Error::shape("sleepnet", ctx.tape.shape(signal), ctx.tape.shape(tfr)));
        }
        let f = self.fin.forward(ctx, signal)?;
        let n = self.n1.forward(ctx, tfr)?;
        let joined = ctx.tape.concat(&[f, n], 1)?;
        ctx.record("fusion.concat", joined);
        let joined = self.dropout.forward(ctx, joined)?;
        let output = self.head.forward(ctx, joined)?;
        Ok(Forward {
            output,
            taps: BTreeMap::from([(TAP_FIN, f), (TAP_N1, n)]),
        })
    }
}
