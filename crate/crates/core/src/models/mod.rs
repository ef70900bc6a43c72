//! The three networks: the feature-imitating network (FIN) that regresses
//! kurtosis and skewness from a raw signal, the N1 detector over a stack of
//! six time-frequency windows, and the fused five-stage classifier that
//! reuses both trunks under a KAN (or MLP) head.

mod nets;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Float, Mode, ParamStore, Tensor, Var};
use crate::dsp::WINDOWS_PER_EPOCH;
use crate::error::{Error, Result};

pub use nets::{fin_time_steps, FinNet, FinTrunk, FullNet, HeadNet, N1Net, N1Trunk};

/// Width preset. `Desk` divides every width by four and resizes the
/// time-frequency input to 32×64 so experiments run on a laptop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::InvalidArgument(format!("unknown scale `{s}` (expected paper or desk)"))),
        }
    }
}

/// Every width that differs between scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Dims {
    pub fin_filters: [usize; 5],
    pub ltc_units: usize,
    pub fin_dense: [usize; 2],
    pub fin_head: usize,
    pub stem_filters: usize,
    pub residual_filters: [usize; 3],
    pub se_reduction: usize,
    pub aspp_filters: usize,
    pub aspp_rates: [usize; 4],
    pub lstm_units: usize,
    pub n1_dense: [usize; 2],
    pub head_hidden: [usize; 2],
    pub resize: (usize, usize),
    pub dropout: f64,
}

impl Scale {
    pub fn dims(self) -> Dims {
        let paper = Dims {
            fin_filters: [16, 32, 64, 128, 256],
            ltc_units: 128,
            fin_dense: [64, 32],
            fin_head: 16,
            stem_filters: 16,
            residual_filters: [32, 64, 128],
            se_reduction: 8,
            aspp_filters: 256,
            aspp_rates: [1, 6, 12, 18],
            lstm_units: 64,
            n1_dense: [128, 32],
            head_hidden: [64, 32],
            resize: (64, 128),
            dropout: 0.2,
        };
        match self {
            Scale::Paper => paper,
            Scale::Desk => {
                let q = |v: usize| v / 4;
                Dims {
                    fin_filters: paper.fin_filters.map(q),
                    ltc_units: q(paper.ltc_units),
                    fin_dense: paper.fin_dense.map(q),
                    fin_head: q(paper.fin_head),
                    stem_filters: q(paper.stem_filters),
                    residual_filters: paper.residual_filters.map(q),
                    aspp_filters: q(paper.aspp_filters),
                    lstm_units: q(paper.lstm_units),
                    n1_dense: paper.n1_dense.map(q),
                    head_hidden: paper.head_hidden.map(q),
                    resize: (32, 64),
                    ..paper
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Kan,
    Mlp,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Kan => "kan",
            HeadKind::Mlp => "mlp",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kan" => Ok(HeadKind::Kan),
            "mlp" => Ok(HeadKind::Mlp),
            _ => Err(Error::InvalidArgument(format!("unknown head `{s}` (expected kan or mlp)"))),
        }
    }
}

/// Time-frequency input size produced by the transform, before resizing.
pub const TFR_FREQ_BINS: usize = 256;
pub const TFR_WINDOW_LEN: usize = 512;
pub const STAGE_CLASSES: usize = 5;
/// Shortest FIN input that survives five halvings.
pub const FIN_MIN_LEN: usize = 32;

/// Everything needed to rebuild a network's topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Fin { scale: Scale, input_len: usize },
    N1 { scale: Scale, windows: usize },
    Full { scale: Scale, head: HeadKind, signal_len: usize, windows: usize },
}

impl ModelSpec {
    pub fn scale(&self) -> Scale {
        match *self {
            ModelSpec::Fin { scale, .. } | ModelSpec::N1 { scale, .. } | ModelSpec::Full { scale, .. } => scale,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Fin { .. } => "fin",
            ModelSpec::N1 { .. } => "n1",
            ModelSpec::Full { .. } => "full",
        }
    }

    /// Named per-record input shapes.
    pub fn input_signature(&self) -> Vec<(&'static str, Vec<usize>)> {
        let tfr = |w: usize| ("tfr", vec![w, TFR_FREQ_BINS, TFR_WINDOW_LEN, 1]);
        match *self {
            ModelSpec::Fin { input_len, .. } => vec![("signal", vec![input_len])],
            ModelSpec::N1 { windows, .. } => vec![tfr(windows)],
            ModelSpec::Full { signal_len, windows, .. } => vec![("signal", vec![signal_len]), tfr(windows)],
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            ModelSpec::Fin { .. } | ModelSpec::N1 { .. } => 2,
            ModelSpec::Full { .. } => STAGE_CLASSES,
        }
    }
}

/// One mini-batch of inputs. Signals are `(batch, len)`; time-frequency
/// stacks are `(batch, windows, h, w)` at either the transform size or the
/// model's resize target.
#[derive(Clone, Debug, Default)]
pub struct Batch<T> {
    pub signal: Option<Tensor<T>>,
    pub tfr: Option<Tensor<T>>,
}

/// Output of a forward pass plus named intermediate representations.
pub struct Forward {
    pub output: Var,
    pub taps: BTreeMap<&'static str, Var>,
}

pub const TAP_FIN: &str = "fin_features";
pub const TAP_N1: &str = "n1_features";

/// A network topology with its parameters.
pub struct Model<T: Float> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    net: Net,
}

enum Net {
    Fin(FinNet),
    N1(N1Net),
    Full(FullNet),
}

impl<T: Float> Model<T> {
    /// Builds a freshly initialized model; initialization is a pure
    /// function of `(spec, seed)`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = match spec {
            ModelSpec::Fin { scale, input_len } => Net::Fin(FinNet::new(&mut store, seed, &scale.dims(), input_len)?),
            ModelSpec::N1 { scale, windows } => Net::N1(N1Net::new(&mut store, seed, &scale.dims(), windows)?),
            ModelSpec::Full {
                scale,
                head,
                signal_len,
                windows,
            } => Net::Full(FullNet::new(&mut store, seed, &scale.dims(), head, signal_len, windows)?),
        };
        Ok(Model { spec, store, net })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, batch: &Batch<T>) -> Result<Forward> {
        fn need<'b, T>(t: &'b Option<Tensor<T>>, model: &str, what: &str) -> Result<&'b Tensor<T>> {
            t.as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("{model} model needs a {what} input")))
        }
        let name = self.spec.name();
        match &self.net {
            Net::Fin(net) => {
                let x = ctx.tape.constant(need(&batch.signal, name, "signal")?.clone());
                net.forward(ctx, x)
            }
            Net::N1(net) => {
                let x = ctx.tape.constant(need(&batch.tfr, name, "time-frequency")?.clone());
                net.forward(ctx, x)
            }
            Net::Full(net) => {
                let s = ctx.tape.constant(need(&batch.signal, name, "signal")?.clone());
                let t = ctx.tape.constant(need(&batch.tfr, name, "time-frequency")?.clone());
                net.forward(ctx, s, t)
            }
        }
    }

    /// Output values `(batch, width)` in evaluation mode.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval, 0);
        let f = self.forward(&mut ctx, batch)?;
        Ok(ctx.tape.value(f.output).clone())
    }

    /// Tap values in evaluation mode.
    pub fn taps(&self, batch: &Batch<T>) -> Result<BTreeMap<&'static str, Tensor<T>>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval, 0);
        let f = self.forward(&mut ctx, batch)?;
        Ok(f.taps.iter().map(|(k, &v)| (*k, ctx.tape.value(v).clone())).collect())
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn n1_trunk(&self) -> Option<&N1Trunk> {
        match &self.net {
            Net::N1(n) => Some(&n.trunk),
            Net::Full(f) => Some(&f.n1),
            Net::Fin(_) => None,
        }
    }

    /// A zero batch of `batch` records matching the input signature, with
    /// time-frequency input at the model's resize target.
    pub fn probe_batch(&self, batch: usize) -> Batch<T> {
        let (h, w) = self.spec.scale().dims().resize;
        let mut out = Batch::default();
        for (name, shape) in self.spec.input_signature() {
            match name {
                "signal" => out.signal = Some(Tensor::zeros(vec![batch, shape[0]])),
                _ => out.tfr = Some(Tensor::zeros(vec![batch, shape[0], h, w])),
            }
        }
        out
    }

    /// Every recorded layer with its output shape (batch of one) and its
    /// trainable parameter count.
    pub fn summary(&self) -> Result<Vec<SummaryRow>> {
        let batch = self.probe_batch(1);
        let mut ctx = Ctx::new(&self.store, Mode::Eval, 0).with_trace();
        self.forward(&mut ctx, &batch)?;
        let mut seen = std::collections::BTreeSet::new();
        Ok(ctx
            .take_trace()
            .into_iter()
            .filter(|e| seen.insert(e.name.clone()))
            .map(|e| SummaryRow {
                params: self.store.trainable_count_with_prefix(&format!("{}.", e.name)),
                layer: e.name,
                output_shape: e.shape,
            })
            .collect())
    }

    pub fn summary_text(&self) -> Result<String> {
        let rows = self.summary()?;
        let width = rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:<22}  {:>10}\n", "layer", "output shape", "params");
        for r in &rows {
            s += &format!("{:<width$}  {:<22}  {:>10}\n", r.layer, format!("{:?}", r.output_shape), r.params);
        }
        s += &format!("total trainable parameters: {}\n", self.trainable_count());
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub layer: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

pub fn build_fin<T: Float>(input_len: usize, scale: Scale, seed: u64) -> Result<Model<T>> {
    Model::build(ModelSpec::Fin { scale, input_len }, seed)
}

pub fn build_n1_detector<T: Float>(scale: Scale, seed: u64) -> Result<Model<T>> {
    Model::build(
        ModelSpec::N1 {
            scale,
            windows: WINDOWS_PER_EPOCH,
        },
        seed,
    )
}

fn is_trunk_param(name: &str) -> bool {
    (name.starts_with("fin.") || name.starts_with("n1.")) && !name.contains(".head.")
}

/// Builds the fused classifier and copies both donors' trunk parameters
/// (heads are left behind). Everything stays trainable.
pub fn fuse_sleepnet<T: Float>(
    fin: &Model<T>,
    n1: &Model<T>,
    head: HeadKind,
    signal_len: usize,
    seed: u64,
) -> Result<Model<T>> {
    let (ModelSpec::Fin { scale: fs, .. }, ModelSpec::N1 { scale: ns, windows }) = (&fin.spec, &n1.spec) else {
        return Err(Error::InvalidArgument("fusion needs a FIN donor and an N1 donor".into()));
    };
    if fs != ns {
        return Err(Error::InvalidArgument(format!(
            "donor scales differ: FIN is {fs}, N1 detector is {ns}"
        )));
    }
    let mut fused = Model::build(
        ModelSpec::Full {
            scale: *fs,
            head,
            signal_len,
            windows: *windows,
        },
        seed,
    )?;
    let a = fused.store.copy_from(&fin.store, |n| n.starts_with("fin.") && is_trunk_param(n));
    let b = fused.store.copy_from(&n1.store, |n| n.starts_with("n1.") && is_trunk_param(n));
    let expected = fused.store.iter().filter(|(_, p)| is_trunk_param(&p.name)).count();
    if a + b != expected {
        return Err(Error::InvalidArgument(format!(
            "donors supplied {} of {expected} trunk parameters",
            a + b
        )));
    }
    Ok(fused)
}

/// Same model with the head replaced by a freshly initialized one of kind
/// `head` (trunk parameters are copied).
pub fn swap_head<T: Float>(fused: &Model<T>, head: HeadKind, seed: u64) -> Result<Model<T>> {
    let ModelSpec::Full {
        scale,
        signal_len,
        windows,
        ..
    } = fused.spec
    else {
        return Err(Error::InvalidArgument("only the fused model has a swappable head".into()));
    };
    let mut out = Model::build(
        ModelSpec::Full {
            scale,
            head,
            signal_len,
            windows,
        },
        seed,
    )?;
    out.store.copy_from(&fused.store, is_trunk_param);
    Ok(out)
}

pub fn swap_head_mlp<T: Float>(fused: &Model<T>, seed: u64) -> Result<Model<T>> {
    swap_head(fused, HeadKind::Mlp, seed)
}
