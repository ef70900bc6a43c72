use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sleepstage::augment::{augment, AugmentMethod, AugmentPlan};
use sleepstage::autodiff::Float;
use sleepstage::dataset::{
    build_n1_subset, gen_fin_corpus, gen_labeled_synthetic, ingest, load_dataset, save_dataset, split, FinSet,
    SplitRatios, N1_BINARY_NAMES, STAGE_NAMES,
};
use sleepstage::dsp::{EpochTransform, SstConfig, SynthKind, EPOCH_LEN};
use sleepstage::layers::check::{check_all_layers, check_layer, LAYER_KINDS};
use sleepstage::metrics::{confusion, latency_probe, regression_report, summary};
use sleepstage::models::{HeadKind, Model, ModelSpec, Scale};
use sleepstage::train::{
    derive_seed, epoch_batch, evaluate, load_checkpoint, stage_inputs, tfr_stacks, train_stage,
    Evaluation, FullInit, Inputs, OptimizerKind, RunConfig, StageKind, Targets, TrainOutcome,
};
use sleepstage::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "sleepstage", version, about = "Three-stage ECG sleep-stage classification pipeline")]
pub struct Cli {
    /// Log filter (error, warn, info, debug, trace)
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the moment-regression corpus (chirp, step and noise signals)
    GenSynth(GenSynthArgs),
    /// Generate the separable five-class synthetic epoch corpus
    GenSynthCorpus(GenCorpusArgs),
    /// Read native signal/annotation records into a dataset manifest
    Ingest(IngestArgs),
    /// Stratified train/validation/test split
    Split(SplitArgs),
    /// Balanced N1-vs-rest subset of a training split
    BuildN1Subset(N1SubsetArgs),
    /// Oversample or augment a training split
    Augment(AugmentArgs),
    /// Precompute normalized time-frequency stacks into a cache directory
    PrepTfr(PrepTfrArgs),
    /// Train the moment-imitating network
    TrainFin(TrainArgs),
    /// Train the N1 detector
    TrainN1(TrainArgs),
    /// Train the fused five-stage classifier
    TrainFull(TrainFullArgs),
    /// Score a checkpoint on a dataset
    Evaluate(EvaluateArgs),
    /// Classify one raw 30-second epoch
    Predict(PredictArgs),
    /// Finite-difference gradient checks for every layer kind
    GradCheck(GradCheckArgs),
    /// Time single-epoch inference
    BenchLatency(BenchArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenSynthArgs {
    /// Training signals
    #[arg(long, default_value_t = 20_000)]
    count: usize,
    /// Validation signals
    #[arg(long, default_value_t = 2_000)]
    val: usize,
    /// Test signals
    #[arg(long, default_value_t = 2_000)]
    test: usize,
    /// Samples per signal
    #[arg(long, default_value_t = EPOCH_LEN)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/fin_data")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GenCorpusArgs {
    /// Records per class
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/corpus")]
    out_dir: PathBuf,
    /// Manifest name
    #[arg(long, default_value = "corpus")]
    name: String,
}

#[derive(Args, Debug, Serialize)]
pub struct IngestArgs {
    /// Directory of `<id>.sig` files
    #[arg(long)]
    records: PathBuf,
    /// Directory of `<id>.ann` files [default: the records directory]
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value = "out/ingest")]
    out_dir: PathBuf,
    #[arg(long, default_value = "dataset")]
    name: String,
}

#[derive(Args, Debug, Serialize)]
pub struct SplitArgs {
    /// Dataset manifest to split
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    val_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    test_ratio: f64,
    /// Keep every subject inside one split
    #[arg(long)]
    subject_level: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/split")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct N1SubsetArgs {
    /// Five-stage training manifest
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/split")]
    out_dir: PathBuf,
    #[arg(long, default_value = "n1_train")]
    name: String,
}

#[derive(Args, Debug, Serialize)]
pub struct AugmentArgs {
    /// Training manifest (never modified)
    #[arg(long)]
    dataset: PathBuf,
    /// none, smote, adasyn or custom
    #[arg(long, default_value_t = AugmentMethod::Smote)]
    method: AugmentMethod,
    #[arg(long, default_value_t = 5)]
    k_neighbors: usize,
    /// ADASYN balance level
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Per-class size for the custom pipeline
    #[arg(long, default_value_t = 4000)]
    target_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/augment")]
    out_dir: PathBuf,
    /// Manifest name [default: <input name>_<method>]
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct PrepTfrArgs {
    /// Dataset manifests to transform
    #[arg(long, required = true, num_args = 1..)]
    dataset: Vec<PathBuf>,
    /// desk or paper (sets the resize target)
    #[arg(long, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long, default_value = "out/cache")]
    cache_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation manifest
    #[arg(long)]
    val: Option<PathBuf>,
    /// Test manifest, scored with the best weights after training
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory [default: runs/<stage>]
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Time-frequency cache directory [default: none]
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// desk or paper [default: desk]
    #[arg(long)]
    scale: Option<Scale>,
    /// Seed for initialization, shuffling, dropout and augmentation [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: fin 20, n1 100, full 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// sgd, adam or adamax [default: fin adam, n1 sgd, full adamax]
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Initial learning rate [default: fin 1e-3, n1 1e-2, full 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Early-stopping patience in epochs, 0 disables [default: full 10, others off]
    #[arg(long)]
    early_stop_patience: Option<usize>,
    /// Stop once validation accuracy reaches this fraction [default: off]
    #[arg(long)]
    stop_at_accuracy: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainFullArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: TrainArgs,
    /// FIN donor checkpoint
    #[arg(long)]
    fin_checkpoint: Option<PathBuf>,
    /// N1-detector donor checkpoint
    #[arg(long)]
    n1_checkpoint: Option<PathBuf>,
    /// Start from random weights (no-pretraining ablation)
    #[arg(long, conflicts_with = "fin_only_init")]
    random_init: bool,
    /// Initialize only the FIN trunk from its donor
    #[arg(long)]
    fin_only_init: bool,
    /// kan or mlp [default: kan]
    #[arg(long)]
    head: Option<HeadKind>,
    /// none, smote, adasyn or custom [default: none]
    #[arg(long)]
    augment: Option<AugmentMethod>,
    /// [default: 5]
    #[arg(long)]
    k_neighbors: Option<usize>,
    /// [default: 1.0]
    #[arg(long)]
    beta: Option<f64>,
    /// [default: 4000]
    #[arg(long)]
    target_per_class: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to score (FIN corpus for fin, stage dataset otherwise)
    #[arg(long)]
    dataset: PathBuf,
    /// Expected stage of the checkpoint: fin, n1 or full [default: any]
    #[arg(long)]
    stage: Option<StageKind>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Directory for report.json and confusion CSVs
    #[arg(long, default_value = "out/eval")]
    out_dir: PathBuf,
    /// Also write per-record outputs to <out-dir>/predictions.csv
    #[arg(long)]
    predictions: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw epoch: little-endian f32 samples at 100 Hz
    #[arg(long)]
    epoch: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GradCheckArgs {
    /// Single layer kind [default: all]
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    /// Checkpoint to time [default: freshly initialized full model]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scale of the fresh model
    #[arg(long, default_value_t = Scale::Desk)]
    scale: Scale,
    /// Raw epoch file (f32 LE) [default: a synthetic epoch]
    #[arg(long)]
    epoch: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn emit(event: &str, mut body: Value) {
    if let Value::Object(m) = &mut body {
        m.insert("event".into(), event.into());
    }
    println!("{body}");
}

fn emit_config<A: Serialize>(command: &str, args: &A) {
    emit("config", json!({ "command": command, "args": args }));
}

fn to_json<S: Serialize>(v: &S) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string()
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::GenSynthCorpus(a) => gen_corpus(a),
        Command::Ingest(a) => ingest_cmd(a),
        Command::Split(a) => split_cmd(a),
        Command::BuildN1Subset(a) => n1_subset(a),
        Command::Augment(a) => augment_cmd(a),
        Command::PrepTfr(a) => prep_tfr(a),
        Command::TrainFin(a) => train(StageKind::Fin, &a, None),
        Command::TrainN1(a) => train(StageKind::N1, &a, None),
        Command::TrainFull(a) => train(StageKind::Full, &a.common, Some(&a)),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a),
        Command::GradCheck(a) => grad_check(a),
        Command::BenchLatency(a) => bench(a),
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    emit_config("gen-synth", &a);
    create_dir(&a.out_dir)?;
    for (i, (name, count)) in [("fin_train", a.count), ("fin_val", a.val), ("fin_test", a.test)].into_iter().enumerate() {
        let set = gen_fin_corpus(count, a.len, derive_seed(a.seed, i as u64))?;
        let path = set.save(&a.out_dir, name)?;
        emit("written", json!({ "manifest": path, "count": count, "len": a.len }));
    }
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    emit_config("gen-synth-corpus", &a);
    let data = gen_labeled_synthetic(a.per_class, a.seed)?;
    let path = save_dataset(&a.out_dir, &a.name, &data)?;
    emit("written", json!({ "manifest": path, "class_counts": data.class_counts() }));
    Ok(())
}

fn ingest_cmd(a: IngestArgs) -> Result<()> {
    emit_config("ingest", &a);
    let (data, report) = ingest(&a.records, a.annotations.as_deref())?;
    let path = save_dataset(&a.out_dir, &a.name, &data)?;
    emit("ingested", json!({ "manifest": path, "report": report, "class_counts": data.class_counts() }));
    Ok(())
}

fn split_cmd(a: SplitArgs) -> Result<()> {
    emit_config("split", &a);
    let data = load_dataset(&a.dataset)?;
    let ratios = SplitRatios {
        train: a.train_ratio,
        val: a.val_ratio,
        test: a.test_ratio,
    };
    let s = split(&data, ratios, a.seed, a.subject_level)?;
    for (name, part) in s.parts() {
        let path = save_dataset(&a.out_dir, name, part)?;
        emit("written", json!({ "manifest": path, "class_counts": part.class_counts() }));
    }
    Ok(())
}

fn n1_subset(a: N1SubsetArgs) -> Result<()> {
    emit_config("build-n1-subset", &a);
    let sub = build_n1_subset(&load_dataset(&a.train)?, a.seed)?;
    let path = save_dataset(&a.out_dir, &a.name, &sub)?;
    emit("written", json!({ "manifest": path, "class_counts": sub.class_counts() }));
    Ok(())
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    emit_config("augment", &a);
    let data = load_dataset(&a.dataset)?;
    let plan = AugmentPlan {
        method: a.method,
        k_neighbors: a.k_neighbors,
        beta: a.beta,
        target_per_class: a.target_per_class,
        seed: a.seed,
    };
    let name = a.name.clone().unwrap_or_else(|| format!("{}_{}", stem(&a.dataset), a.method));
    let target = a.out_dir.join(format!("{name}.json"));
    if fs::canonicalize(&target).ok().is_some_and(|t| fs::canonicalize(&a.dataset).ok() == Some(t)) {
        return Err(Error::InvalidArgument("augment never writes over its input; pick another --name or --out-dir".into()));
    }
    let (aug, report) = augment(&data, &plan)?;
    let path = save_dataset(&a.out_dir, &name, &aug)?;
    emit("written", json!({ "manifest": path, "report": report }));
    Ok(())
}

fn prep_tfr(a: PrepTfrArgs) -> Result<()> {
    emit_config("prep-tfr", &a);
    let (h, w) = a.scale.dims().resize;
    for path in &a.dataset {
        let data = load_dataset(path)?;
        let stacks = tfr_stacks(&data, h, w, Some(&a.cache_dir))?;
        emit(
            "prepared",
            json!({ "dataset": path, "records": data.len(), "stack_shape": [6, h, w], "values": stacks.len() }),
        );
    }
    Ok(())
}

/// Stage defaults, then the config file, then explicit flags.
fn resolve_config(stage: StageKind, a: &TrainArgs, full: Option<&TrainFullArgs>) -> Result<RunConfig> {
    let mut over = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?;
            serde_json::from_str::<Value>(&text).map_err(|source| Error::Json { path: p.clone(), source })?
        }
        None => json!({}),
    };
    if !over.is_object() {
        return Err(Error::InvalidArgument("the run configuration must be a JSON object".into()));
    }
    let set = |over: &mut Value, path: &[&str], v: Value| {
        let mut cur = over;
        for key in &path[..path.len() - 1] {
            let obj = cur.as_object_mut().expect("object");
            cur = obj.entry(key.to_string()).or_insert_with(|| json!({}));
        }
        cur.as_object_mut().expect("object").insert(path[path.len() - 1].to_string(), v);
    };
    let opt = |v: &Option<PathBuf>| v.as_ref().map(to_json);
    let flags: Vec<(&[&str], Option<Value>)> = vec![
        (&["train"], opt(&a.train)),
        (&["val"], opt(&a.val)),
        (&["test"], opt(&a.test)),
        (&["out_dir"], opt(&a.out_dir)),
        (&["cache_dir"], opt(&a.cache_dir)),
        (&["scale"], a.scale.map(|v| to_json(&v))),
        (&["seed"], a.seed.map(|v| json!(v))),
        (&["epochs"], a.epochs.map(|v| json!(v))),
        (&["batch_size"], a.batch_size.map(|v| json!(v))),
        (&["optimizer", "kind"], a.optimizer.map(|v| to_json(&v))),
        (&["optimizer", "lr"], a.lr.map(|v| json!(v))),
        (
            &["early_stop_patience"],
            a.early_stop_patience.map(|p| if p == 0 { Value::Null } else { json!(p) }),
        ),
        (&["stop_at_val_accuracy"], a.stop_at_accuracy.map(|v| json!(v))),
    ];
    for (path, v) in flags {
        if let Some(v) = v {
            set(&mut over, path, v);
        }
    }
    if let Some(f) = full {
        let init = if f.random_init {
            Some(FullInit::Random)
        } else if f.fin_only_init {
            Some(FullInit::FinOnly)
        } else {
            None
        };
        let flags: Vec<(&[&str], Option<Value>)> = vec![
            (&["fin_checkpoint"], opt(&f.fin_checkpoint)),
            (&["n1_checkpoint"], opt(&f.n1_checkpoint)),
            (&["init"], init.map(|v| to_json(&v))),
            (&["head"], f.head.map(|v| to_json(&v))),
            (&["augment", "method"], f.augment.map(|v| to_json(&v))),
            (&["augment", "k_neighbors"], f.k_neighbors.map(|v| json!(v))),
            (&["augment", "beta"], f.beta.map(|v| json!(v))),
            (&["augment", "target_per_class"], f.target_per_class.map(|v| json!(v))),
        ];
        for (path, v) in flags {
            if let Some(v) = v {
                set(&mut over, path, v);
            }
        }
    }
    let cfg = RunConfig::from_json(stage, &over)?;
    if cfg.train.as_os_str().is_empty() || cfg.val.as_os_str().is_empty() {
        return Err(Error::InvalidArgument("--train and --val (or their config fields) are required".into()));
    }
    Ok(cfg)
}

fn class_names(stage: StageKind) -> Vec<String> {
    let names: &[&str] = if stage == StageKind::N1 { &N1_BINARY_NAMES } else { &STAGE_NAMES };
    names.iter().map(|s| s.to_string()).collect()
}

/// Scores an evaluation; writes confusion CSVs for classifiers.
fn score(stage: StageKind, inputs: &Inputs, eval: &Evaluation, out_dir: &Path) -> Result<Value> {
    match &inputs.targets {
        Targets::Moments(m) => {
            let r = regression_report(&eval.outputs, m)?;
            Ok(json!({ "loss": eval.loss, "kurtosis": { "mse": r.mse[0], "mae": r.mae[0] }, "skewness": { "mse": r.mse[1], "mae": r.mae[1] }, "count": r.count }))
        }
        Targets::Classes { labels, classes } => {
            let names = class_names(stage);
            let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            let cm = confusion(&eval.predictions(), &truth, *classes)?;
            let s = summary(&cm, &names)?;
            create_dir(out_dir)?;
            for (file, pct) in [("confusion.csv", false), ("confusion_percent.csv", true)] {
                let p = out_dir.join(file);
                fs::write(&p, cm.to_csv(&names, pct)).map_err(|source| Error::Io { path: p, source })?;
            }
            for line in s.to_text().lines() {
                log::info!("{line}");
            }
            Ok(json!({ "loss": eval.loss, "summary": s, "confusion": cm.counts }))
        }
    }
}

fn train(stage: StageKind, a: &TrainArgs, full: Option<&TrainFullArgs>) -> Result<()> {
    let cfg = resolve_config(stage, a, full)?;
    emit("config", json!({ "command": format!("train-{stage}"), "seed": cfg.seed, "config": cfg }));
    let TrainOutcome {
        history,
        best_epoch,
        stopped_early,
        checkpoint,
        metrics_log,
        test,
        ..
    } = train_stage(&cfg)?;
    for row in &history {
        emit("epoch", to_json(row));
    }
    let test = match &test {
        Some((inputs, eval)) => Some(score(stage, inputs, eval, &cfg.out_dir)?),
        None => None,
    };
    let report = json!({
        "stage": stage,
        "seed": cfg.seed,
        "epochs_run": history.len(),
        "best_epoch": best_epoch,
        "stopped_early": stopped_early,
        "best": history.iter().find(|r| r.epoch == best_epoch),
        "checkpoint": checkpoint,
        "metrics_log": metrics_log,
        "test": test,
    });
    write_json(&cfg.out_dir.join("report.json"), &report)?;
    emit("report", report);
    Ok(())
}

fn stage_of(spec: &ModelSpec) -> StageKind {
    match spec {
        ModelSpec::Fin { .. } => StageKind::Fin,
        ModelSpec::N1 { .. } => StageKind::N1,
        ModelSpec::Full { .. } => StageKind::Full,
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    emit_config("evaluate", &a);
    let model = load_checkpoint::<f32>(&a.checkpoint)?.model;
    let stage = stage_of(&model.spec);
    if a.stage.is_some_and(|s| s != stage) {
        return Err(Error::InvalidArgument(format!(
            "{} holds a {stage} model",
            a.checkpoint.display()
        )));
    }
    let inputs = stage_inputs(stage, model.spec.scale(), &a.dataset, a.cache_dir.as_deref())?;
    let defaults = RunConfig::defaults(stage);
    let eval = evaluate(&model, &inputs, defaults.loss, defaults.huber_delta, a.batch_size)?;
    let mut report = score(stage, &inputs, &eval, &a.out_dir)?;
    if let (StageKind::Fin, Targets::Moments(targets)) = (stage, &inputs.targets) {
        report["by_kind"] = fin_by_kind(&a.dataset, &eval, targets)?;
    }
    report["stage"] = to_json(&stage);
    report["dataset"] = to_json(&a.dataset);
    create_dir(&a.out_dir)?;
    if a.predictions {
        let p = a.out_dir.join("predictions.csv");
        fs::write(&p, predictions_csv(&inputs, &eval)).map_err(|source| Error::Io { path: p, source })?;
    }
    write_json(&a.out_dir.join("report.json"), &report)?;
    emit("report", report);
    Ok(())
}

fn predictions_csv(inputs: &Inputs, eval: &Evaluation) -> String {
    let width = eval.outputs.first().map_or(0, Vec::len);
    let mut out: Vec<String> = (0..width).map(|j| format!("out{j}")).collect();
    match &inputs.targets {
        Targets::Moments(_) => out.extend(["kurtosis".to_string(), "skewness".to_string()]),
        Targets::Classes { .. } => out.extend(["label".to_string(), "predicted".to_string()]),
    }
    let mut text = out.join(",") + "\n";
    for (i, o) in eval.outputs.iter().enumerate() {
        let mut row: Vec<String> = o.iter().map(|v| v.to_string()).collect();
        match &inputs.targets {
            Targets::Moments(m) => row.extend(m[i].iter().map(|v| v.to_string())),
            Targets::Classes { labels, .. } => {
                row.push(labels[i].to_string());
                row.push(sleepstage::train::argmax(o).to_string());
            }
        }
        text += &(row.join(",") + "\n");
    }
    text
}

/// Moment errors split by synthetic signal kind.
fn fin_by_kind(manifest: &Path, eval: &Evaluation, targets: &[[f64; 2]]) -> Result<Value> {
    let set = FinSet::load(manifest)?;
    let mut out = serde_json::Map::new();
    for kind in SynthKind::ALL {
        let idx: Vec<usize> = (0..set.len()).filter(|&i| set.records[i].kind == kind).collect();
        if idx.is_empty() {
            continue;
        }
        let outputs: Vec<Vec<f64>> = idx.iter().map(|&i| eval.outputs[i].clone()).collect();
        let t: Vec<[f64; 2]> = idx.iter().map(|&i| targets[i]).collect();
        let r = regression_report(&outputs, &t)?;
        out.insert(kind.to_string(), json!({ "count": r.count, "mae": r.mae, "mse": r.mse }));
    }
    Ok(Value::Object(out))
}

fn read_epoch(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.is_empty() || bytes.len() % 4 != 0 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "expected little-endian f32 samples".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn transform_for(model: &Model<f32>) -> Result<Option<EpochTransform>> {
    if model.spec.input_signature().iter().any(|(n, _)| *n == "tfr") {
        let (h, w) = model.spec.scale().dims().resize;
        return Ok(Some(EpochTransform::new(&SstConfig::default(), h, w)?));
    }
    Ok(None)
}

fn predict(a: PredictArgs) -> Result<()> {
    emit_config("predict", &a);
    let model = load_checkpoint::<f32>(&a.checkpoint)?.model;
    let epoch = read_epoch(&a.epoch)?;
    let want = match model.spec {
        ModelSpec::Fin { input_len, .. } => input_len,
        _ => EPOCH_LEN,
    };
    if epoch.len() != want {
        return Err(Error::InvalidArgument(format!(
            "{} holds {} samples; the model expects {want}",
            a.epoch.display(),
            epoch.len()
        )));
    }
    let batch = epoch_batch(&model.spec, transform_for(&model)?.as_ref(), &epoch)?;
    let out: Vec<f64> = model.predict(&batch)?.data().iter().map(|v| v.f64()).collect();
    let stage = stage_of(&model.spec);
    if stage == StageKind::Fin {
        emit("prediction", json!({ "kurtosis": out[0], "skewness": out[1] }));
        return Ok(());
    }
    let names = class_names(stage);
    let best = sleepstage::train::argmax(&out);
    let dist: Vec<Value> = names.iter().zip(&out).map(|(n, p)| json!({ "class": n, "p": p })).collect();
    emit("prediction", json!({ "probabilities": dist, "label": names[best], "index": best }));
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    emit_config("grad-check", &a);
    let checks = match &a.layer {
        Some(l) => {
            let kind = LAYER_KINDS
                .iter()
                .find(|k| **k == l.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown layer `{l}`; known: {}", LAYER_KINDS.join(", "))))?;
            check_layer(kind, a.seed)?
        }
        None => check_all_layers(a.seed)?,
    };
    let mut failed = Vec::new();
    for c in &checks {
        let worst = c.report.max_rel_err();
        let pass = c.report.passed(a.tol);
        if !pass {
            failed.push(c.layer);
        }
        emit(
            "grad_check",
            json!({ "layer": c.layer, "max_rel_err": worst, "tensors": c.report.entries.len(), "pass": pass }),
        );
    }
    if !failed.is_empty() {
        return Err(Error::NonFinite {
            op: "gradient check (analytic and numeric gradients disagree)",
        })
        .inspect_err(|_| log::error!("gradient check failed for {failed:?}"));
    }
    emit("grad_check_summary", json!({ "checks": checks.len(), "tol": a.tol, "pass": true }));
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    emit_config("bench-latency", &a);
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint::<f32>(p)?.model,
        None => Model::build(
            ModelSpec::Full {
                scale: a.scale,
                head: HeadKind::Kan,
                signal_len: EPOCH_LEN,
                windows: 6,
            },
            a.seed,
        )?,
    };
    let epoch = match &a.epoch {
        Some(p) => read_epoch(p)?,
        None => gen_labeled_synthetic(4, a.seed)?.records.swap_remove(0).signal,
    };
    let report = latency_probe(&model, &epoch, a.reps, a.warmup)?;
    emit(
        "latency",
        json!({ "model": model.spec.name(), "scale": model.spec.scale(), "report": report, "additivity_error": report.additivity_error() }),
    );
    Ok(())
}
