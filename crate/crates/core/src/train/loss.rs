use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape, Var};
use crate::error::{Error, Result};

/// Probabilities are clipped into `[CE_CLIP, 1 − CE_CLIP]` before the log.
pub const CE_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Huber,
    CategoricalCrossentropy,
}

impl LossKind {
    /// Scalar loss of `pred` against `target`; `delta` is used by Huber only.
    pub fn apply<T: Float>(self, tape: &mut Tape<T>, pred: Var, target: Var, delta: f64) -> Result<Var> {
        match self {
            LossKind::Huber => huber_loss(tape, pred, target, delta),
            LossKind::CategoricalCrossentropy => categorical_ce(tape, pred, target),
        }
    }
}

fn same_shape<T: Float>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Mean over elements of the Huber penalty of `pred − target`.
pub fn huber_loss<T: Float>(tape: &mut Tape<T>, pred: Var, target: Var, delta: f64) -> Result<Var> {
    same_shape(tape, "huber_loss", pred, target)?;
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("Huber delta must be positive, got {delta}")));
    }
    let r = tape.sub(pred, target)?;
    let h = tape.huber(r, T::of(delta));
    Ok(tape.mean(h))
}

/// Mean over rows of `−Σ y·log p` with `p` clipped away from 0 and 1.
/// Every target row must be one-hot.
pub fn categorical_ce<T: Float>(tape: &mut Tape<T>, probs: Var, one_hot: Var) -> Result<Var> {
    same_shape(tape, "categorical_ce", probs, one_hot)?;
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid_shape("categorical_ce", &shape, "expected (batch, classes)"));
    }
    for row in tape.value(one_hot).data().chunks(shape[1]) {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::InvalidArgument("cross-entropy targets must be one-hot rows".into()));
        }
    }
    let p = tape.clamp(probs, T::of(CE_CLIP), T::of(1.0 - CE_CLIP));
    let logp = tape.log(p);
    let picked = tape.mul(logp, one_hot)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, T::of(-1.0 / shape[0] as f64)))
}
