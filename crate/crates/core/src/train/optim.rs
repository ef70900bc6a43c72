use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, ParamGrads, ParamKind, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamax,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adamax => "adamax",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adamax" => Ok(OptimizerKind::Adamax),
            _ => Err(Error::InvalidArgument(format!("unknown optimizer `{s}` (expected sgd, adam or adamax)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr > 0.0) || !betas_ok || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad optimizer settings: lr {}, betas ({}, {}), eps {}",
                self.lr, self.beta1, self.beta2, self.eps
            )));
        }
        Ok(())
    }
}

/// Plain SGD (no momentum), Adam, or Adamax. Moment estimates are kept per
/// parameter in the model's precision; the update arithmetic runs in `f64`.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub cfg: OptimizerConfig,
    /// Current learning rate (the scheduler may lower it).
    pub lr: f64,
    pub step: u64,
    /// First moment per parameter.
    pub m: Vec<Option<Vec<T>>>,
    /// Second moment (Adam) or infinity-norm accumulator (Adamax).
    pub v: Vec<Option<Vec<T>>>,
}

impl<T: Float> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            lr: cfg.lr,
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.is_empty() {
            return Err(Error::NoGradients);
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.step += 1;
        let (b1, b2, eps, lr) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.lr);
        let t = self.step as i32;
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.kind)).collect();
        for (id, kind) in ids {
            let Some(g) = grads.get(id) else { continue };
            if kind != ParamKind::Trainable {
                continue;
            }
            let w = store.value_mut(id).data_mut();
            let i = id.index();
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g.data()) {
                        *w = T::of(w.f64() - lr * g.f64());
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[i].get_or_insert_with(|| vec![T::zero(); w.len()]);
                    let v = self.v[i].get_or_insert_with(|| vec![T::zero(); w.len()]);
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    for j in 0..w.len() {
                        let gj = g.data()[j].f64();
                        let mj = b1 * m[j].f64() + (1.0 - b1) * gj;
                        let vj = b2 * v[j].f64() + (1.0 - b2) * gj * gj;
                        m[j] = T::of(mj);
                        v[j] = T::of(vj);
                        w[j] = T::of(w[j].f64() - lr * (mj / c1) / ((vj / c2).sqrt() + eps));
                    }
                }
                OptimizerKind::Adamax => {
                    let m = self.m[i].get_or_insert_with(|| vec![T::zero(); w.len()]);
                    let u = self.v[i].get_or_insert_with(|| vec![T::zero(); w.len()]);
                    let c1 = 1.0 - b1.powi(t);
                    for j in 0..w.len() {
                        let gj = g.data()[j].f64();
                        let mj = b1 * m[j].f64() + (1.0 - b1) * gj;
                        let uj = (b2 * u[j].f64()).max(gj.abs());
                        m[j] = T::of(mj);
                        u[j] = T::of(uj);
                        w[j] = T::of(w[j].f64() - lr / c1 * mj / (uj + eps));
                    }
                }
            }
        }
        Ok(())
    }
}
