//! Losses, optimizers, schedules, checkpoints and the per-stage training
//! loop.

mod checkpoint;
mod inputs;
mod loss;
mod optim;
mod schedule;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, LoadedCheckpoint, OptimizerHeader,
    SlotEntry, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use inputs::{as_n1_binary, epoch_batch, tfr_stacks, Inputs, Targets};
pub use loss::{categorical_ce, huber_loss, LossKind, CE_CLIP};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use schedule::{EarlyStopping, PlateauConfig, ReduceLrOnPlateau, StopVerdict};

use crate::augment::{augment, AugmentMethod, AugmentPlan};
use crate::autodiff::{apply_updates, Ctx, Float, Mode, Tensor};
use crate::dataset::{load_dataset, Dataset, FinSet, STAGE_NAMES};
use crate::dsp::WINDOWS_PER_EPOCH;
use crate::error::{io, json, Error, Result};
use crate::models::{build_fin, build_n1_detector, fuse_sleepnet, Batch, HeadKind, Model, ModelSpec, Scale};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Fin,
    N1,
    Full,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Fin => "fin",
            StageKind::N1 => "n1",
            StageKind::Full => "full",
        })
    }
}

impl FromStr for StageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fin" => Ok(StageKind::Fin),
            "n1" => Ok(StageKind::N1),
            "full" => Ok(StageKind::Full),
            _ => Err(Error::InvalidArgument(format!("unknown stage `{s}` (expected fin, n1 or full)"))),
        }
    }
}

/// Where the fused model's trunks start from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullInit {
    /// Both donor checkpoints.
    Pretrained,
    /// FIN donor only; the N1 trunk starts random.
    FinOnly,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: StageKind,
    pub scale: Scale,
    pub seed: u64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossKind,
    pub huber_delta: f64,
    pub plateau: PlateauConfig,
    /// `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    /// Ends training once validation accuracy reaches this value.
    pub stop_at_val_accuracy: Option<f64>,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub fin_checkpoint: Option<PathBuf>,
    pub n1_checkpoint: Option<PathBuf>,
    pub init: FullInit,
    pub head: HeadKind,
    /// Training-split augmentation; its seed is derived from `seed`.
    pub augment: AugmentPlan,
}

impl RunConfig {
    /// Stage defaults: FIN = Huber/Adam 1e-3/20 epochs, N1 = CE/SGD 1e-2/100
    /// epochs, full = CE/Adamax 1e-3/100 epochs with early stopping; batch 8.
    pub fn defaults(stage: StageKind) -> Self {
        let (loss, optimizer, epochs, early) = match stage {
            StageKind::Fin => (LossKind::Huber, OptimizerConfig::new(OptimizerKind::Adam, 1e-3), 20, None),
            StageKind::N1 => (
                LossKind::CategoricalCrossentropy,
                OptimizerConfig::new(OptimizerKind::Sgd, 1e-2),
                100,
                None,
            ),
            StageKind::Full => (
                LossKind::CategoricalCrossentropy,
                OptimizerConfig::new(OptimizerKind::Adamax, 1e-3),
                100,
                Some(10),
            ),
        };
        RunConfig {
            stage,
            scale: Scale::Desk,
            seed: 0,
            batch_size: 8,
            eval_batch_size: 32,
            epochs,
            optimizer,
            loss,
            huber_delta: 1.0,
            plateau: PlateauConfig::default(),
            early_stop_patience: early,
            stop_at_val_accuracy: None,
            train: PathBuf::new(),
            val: PathBuf::new(),
            test: None,
            out_dir: PathBuf::from("runs").join(stage.to_string()),
            cache_dir: None,
            fin_checkpoint: None,
            n1_checkpoint: None,
            init: FullInit::Pretrained,
            head: HeadKind::Kan,
            augment: AugmentPlan::default(),
        }
    }

    /// Stage defaults overlaid with the fields present in `overrides` (a
    /// JSON object); unknown fields are rejected.
    pub fn from_json(stage: StageKind, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::defaults(stage)).expect("config serializes");
        merge(&mut base, overrides);
        let cfg: RunConfig = serde_json::from_value(base)
            .map_err(|e| Error::InvalidArgument(format!("bad run configuration: {e}")))?;
        if cfg.stage != stage {
            return Err(Error::InvalidArgument(format!(
                "configuration is for stage {}, not {stage}",
                cfg.stage
            )));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.epochs == 0 {
            return bad("batch sizes and epochs must be at least 1".into());
        }
        self.optimizer.validate()?;
        ReduceLrOnPlateau::new(self.plateau.clone())?;
        if self.early_stop_patience == Some(0) {
            return bad("early-stopping patience must be at least 1".into());
        }
        if self.stage == StageKind::Fin && self.loss != LossKind::Huber {
            return bad("the FIN regresses moments; use the huber loss".into());
        }
        if !(self.huber_delta > 0.0) {
            return bad(format!("huber_delta must be positive, got {}", self.huber_delta));
        }
        if self.stage == StageKind::Full {
            let need_fin = self.init != FullInit::Random;
            let need_n1 = self.init == FullInit::Pretrained;
            if (need_fin && self.fin_checkpoint.is_none()) || (need_n1 && self.n1_checkpoint.is_none()) {
                return bad(
                    "the full stage needs --fin-checkpoint and --n1-checkpoint (or --random-init for the ablation)".into(),
                );
            }
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: Option<f64>,
    /// Validation mean absolute error per moment `[kurtosis, skewness]`.
    pub val_mae: Option<[f64; 2]>,
}

/// Outputs of a model over a whole input set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// One output row per record.
    pub outputs: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn predictions(&self) -> Vec<usize> {
        self.outputs.iter().map(|r| argmax(r)).collect()
    }

    pub fn accuracy(&self, labels: &[u8]) -> f64 {
        let hits = self.predictions().iter().zip(labels).filter(|(p, &l)| **p == l as usize).count();
        hits as f64 / labels.len().max(1) as f64
    }

    /// Mean absolute error per output column.
    pub fn mae(&self, targets: &[[f64; 2]]) -> [f64; 2] {
        let mut s = [0.0; 2];
        for (o, t) in self.outputs.iter().zip(targets) {
            s[0] += (o[0] - t[0]).abs();
            s[1] += (o[1] - t[1]).abs();
        }
        s.map(|v| v / targets.len().max(1) as f64)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// One optimizer step on one batch in training mode; returns the loss
/// before the update.
pub fn train_step<T: Float>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    loss: LossKind,
    delta: f64,
    batch: &Batch<T>,
    target: &Tensor<T>,
    seed: u64,
) -> Result<f64> {
    let (value, grads, updates) = {
        let mut ctx = Ctx::new(&model.store, Mode::Train, seed);
        let f = model.forward(&mut ctx, batch)?;
        let t = ctx.tape.constant(target.clone());
        let l = loss.apply(&mut ctx.tape, f.output, t, delta)?;
        let value = ctx.tape.value(l).item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let mut g = ctx.tape.backward(l)?;
        (value, ctx.param_grads(&mut g), ctx.take_updates())
    };
    apply_updates(&mut model.store, updates);
    opt.step(&mut model.store, &grads)?;
    Ok(value)
}

/// Evaluation-mode outputs and mean loss over every record of `inputs`.
pub fn evaluate<T: Float>(model: &Model<T>, inputs: &Inputs, loss: LossKind, delta: f64, batch: usize) -> Result<Evaluation> {
    let mut total = 0.0;
    let mut outputs = Vec::with_capacity(inputs.len);
    let all: Vec<usize> = (0..inputs.len).collect();
    for idx in all.chunks(batch.max(1)) {
        let (b, target) = inputs.batch::<T>(idx);
        let mut ctx = Ctx::new(&model.store, Mode::Eval, 0);
        let f = model.forward(&mut ctx, &b)?;
        let t = ctx.tape.constant(target);
        let l = loss.apply(&mut ctx.tape, f.output, t, delta)?;
        total += ctx.tape.value(l).item().f64() * idx.len() as f64;
        let out = ctx.tape.value(f.output);
        outputs.extend((0..idx.len()).map(|r| out.row(r).iter().map(|v| v.f64()).collect::<Vec<f64>>()));
    }
    Ok(Evaluation {
        loss: total / inputs.len.max(1) as f64,
        outputs,
    })
}

/// SplitMix64 step: independent seeds for separate random streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub model: Model<f32>,
    pub history: Vec<EpochRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub test: Option<(Inputs, Evaluation)>,
}

/// Inputs of one split for a stage.
pub fn stage_inputs(stage: StageKind, scale: Scale, path: &Path, cache_dir: Option<&Path>) -> Result<Inputs> {
    match stage {
        StageKind::Fin => Ok(Inputs::fin(&FinSet::load(path)?)),
        StageKind::N1 => Inputs::epochs(&as_n1_binary(load_dataset(path)?)?, false, Some(scale.dims().resize), cache_dir),
        StageKind::Full => {
            let data = load_stage_set(path)?;
            Inputs::epochs(&data, true, Some(scale.dims().resize), cache_dir)
        }
    }
}

fn load_stage_set(path: &Path) -> Result<Dataset> {
    let data = load_dataset(path)?;
    if data.class_names != STAGE_NAMES {
        return Err(Error::InvalidArgument(format!(
            "{} holds classes {:?}; the full model needs the five stages",
            path.display(),
            data.class_names
        )));
    }
    Ok(data)
}

fn initial_model(cfg: &RunConfig, train: &Inputs) -> Result<Model<f32>> {
    let seed = derive_seed(cfg.seed, 1);
    match cfg.stage {
        StageKind::Fin => build_fin(train.signal_len, cfg.scale, seed),
        StageKind::N1 => build_n1_detector(cfg.scale, seed),
        StageKind::Full => {
            let spec = ModelSpec::Full {
                scale: cfg.scale,
                head: cfg.head,
                signal_len: train.signal_len,
                windows: WINDOWS_PER_EPOCH,
            };
            let donor = |p: &Option<PathBuf>, want: StageKind| -> Result<Model<f32>> {
                let p = p.as_ref().expect("validated");
                let m = load_checkpoint::<f32>(p)?.model;
                if m.spec.name() != want.to_string() {
                    return Err(Error::Checkpoint(format!(
                        "{} holds a {} model, expected {want}",
                        p.display(),
                        m.spec.name()
                    )));
                }
                Ok(m)
            };
            match cfg.init {
                FullInit::Random => Model::build(spec, seed),
                FullInit::FinOnly => {
                    let n1 = build_n1_detector(cfg.scale, derive_seed(cfg.seed, 2))?;
                    fuse_sleepnet(&donor(&cfg.fin_checkpoint, StageKind::Fin)?, &n1, cfg.head, train.signal_len, seed)
                }
                FullInit::Pretrained => fuse_sleepnet(
                    &donor(&cfg.fin_checkpoint, StageKind::Fin)?,
                    &donor(&cfg.n1_checkpoint, StageKind::N1)?,
                    cfg.head,
                    train.signal_len,
                    seed,
                ),
            }
        }
    }
}

fn write_json_file<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(json(path))?;
    fs::write(path, text + "\n").map_err(io(path))
}

/// Runs one training stage end to end: loads data, builds or fuses the
/// model, trains with seeded shuffling, logs one JSON row per epoch,
/// keeps the best-validation-loss weights (saved as a checkpoint) and
/// optionally scores the test split.
pub fn train_stage(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(io(&cfg.out_dir))?;
    let cache = cfg.cache_dir.as_deref();
    let train = if cfg.stage != StageKind::Fin && cfg.augment.method != AugmentMethod::None {
        let mut data = load_dataset(&cfg.train)?;
        if cfg.stage == StageKind::N1 {
            data = as_n1_binary(data)?;
        }
        let plan = AugmentPlan {
            seed: derive_seed(cfg.seed, 4),
            ..cfg.augment.clone()
        };
        let (aug, report) = augment(&data, &plan)?;
        log::info!("{} augmentation: {:?} -> {:?}", report.method, report.before, report.after);
        let tfr = Some(cfg.scale.dims().resize);
        Inputs::epochs(&aug, cfg.stage == StageKind::Full, tfr, cache)?
    } else {
        stage_inputs(cfg.stage, cfg.scale, &cfg.train, cache)?
    };
    let val = stage_inputs(cfg.stage, cfg.scale, &cfg.val, cache)?;
    if train.len == 0 || val.len == 0 {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }

    let mut model = initial_model(cfg, &train)?;
    let mut opt = Optimizer::<f32>::new(cfg.optimizer.clone())?;
    let mut plateau = ReduceLrOnPlateau::new(cfg.plateau.clone())?;
    let mut early = EarlyStopping::new(cfg.early_stop_patience.unwrap_or(usize::MAX))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));

    write_json_file(&cfg.out_dir.join("config.json"), cfg)?;
    let name = cfg.stage.to_string();
    let checkpoint = cfg.out_dir.join(format!("{name}.ckpt"));
    let metrics_log = cfg.out_dir.join(format!("{name}.metrics.jsonl"));
    let mut log_file = fs::File::create(&metrics_log).map_err(io(&metrics_log))?;

    let mut history = Vec::new();
    let mut best: Option<(usize, crate::autodiff::ParamStore<f32>)> = None;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.lr;
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, target) = train.batch::<f32>(idx);
            let seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | b as u64);
            total += train_step(&mut model, &mut opt, cfg.loss, cfg.huber_delta, &batch, &target, seed)? * idx.len() as f64;
        }
        let eval = evaluate(&model, &val, cfg.loss, cfg.huber_delta, cfg.eval_batch_size)?;
        let row = EpochRow {
            epoch,
            lr,
            train_loss: total / train.len as f64,
            val_loss: eval.loss,
            val_acc: val.labels().map(|l| eval.accuracy(l)),
            val_mae: match &val.targets {
                Targets::Moments(m) => Some(eval.mae(m)),
                Targets::Classes { .. } => None,
            },
        };
        log::info!(
            "{name} epoch {epoch}: lr {lr:.2e} train {:.5} val {:.5}{}",
            row.train_loss,
            row.val_loss,
            row.val_acc.map(|a| format!(" acc {a:.4}")).unwrap_or_default()
        );
        let line = serde_json::to_string(&row).map_err(json(&metrics_log))?;
        writeln!(log_file, "{line}").map_err(io(&metrics_log))?;
        history.push(row.clone());

        let verdict = early.update(eval.loss, epoch);
        if verdict.improved {
            save_checkpoint(&checkpoint, &model, Some(&opt), epoch, Some(eval.loss))?;
            best = Some((epoch, model.store.clone()));
        }
        opt.lr = plateau.step(eval.loss, opt.lr);
        if cfg.early_stop_patience.is_some() && verdict.stop {
            log::info!("{name}: no validation improvement for {} epochs; stopping", early.patience);
            stopped_early = true;
            break;
        }
        if let (Some(goal), Some(acc)) = (cfg.stop_at_val_accuracy, row.val_acc) {
            if acc >= goal {
                break;
            }
        }
    }
    let (best_epoch, store) = best.ok_or(Error::NonFinite { op: "validation loss" })?;
    model.store = store;

    let test = match &cfg.test {
        Some(p) => {
            let inputs = stage_inputs(cfg.stage, cfg.scale, p, cache)?;
            let eval = evaluate(&model, &inputs, cfg.loss, cfg.huber_delta, cfg.eval_batch_size)?;
            Some((inputs, eval))
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
        checkpoint,
        metrics_log,
        test,
    })
}
