//! Command-line front end: `synth`, `train`, `encode`, `evaluate`, `sweep`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TrainConfig, Variant};
use crate::dataset::{
    load_aux, load_features, load_labels, make_split, synth_dataset, write_aux, write_features,
    AuxSemantics, DatasetSplit, FeatureFormat, FeatureMatrix, SynthParams,
};
use crate::error::{Error, Result};
use crate::graph::Bandwidth;
use crate::objective::{AdversarialForm, Hyperparams};
use crate::retrieval::{evaluate, ApDenominator, EvalOptions, EvalReport, HashCodes};
use crate::trainer::{training_log_csv, TrainedModel, Trainer};

#[derive(Debug, Parser)]
#[command(name = "lagnh", version, about = "Unsupervised graph hashing and Hamming retrieval")]
pub struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// key=value file; its entries override command-line flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a clustered synthetic dataset with a split.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Encode items with a trained model.
    Encode(EncodeArgs),
    /// Score query codes against database codes.
    Evaluate(EvaluateArgs),
    /// Train, encode and evaluate once per value of one parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Text,
    Binary,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    #[arg(long, default_value_t = 10.0)]
    pub sep: f64,
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    #[arg(long, default_value_t = 1000)]
    pub train: usize,
    #[arg(long, default_value_t = 400)]
    pub query: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Coco,
    Nus,
}

/// Data inputs shared by `train` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub aux: PathBuf,
    /// Split file; training uses its `train` items, otherwise every item.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

/// Model and optimizer settings. Unset flags keep the profile defaults.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Profile::Coco)]
    pub profile: Profile,
    #[arg(long, default_value_t = Variant::Full)]
    pub variant: Variant,
    /// Code length.
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub d_prime: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// Scale k applied to the reconstruction target.
    #[arg(long = "k-scale")]
    pub k_scale: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Fixed visual-graph bandwidth; the median heuristic otherwise.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub disc_steps: Option<usize>,
    /// Informational batch size, recorded in the manifest.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Train the attention projections too.
    #[arg(long)]
    pub joint_attention: bool,
    /// Use the saturating `log(1 - D(z))` generator term.
    #[arg(long)]
    pub saturating: bool,
}

impl ModelArgs {
    pub fn resolve(&self, seed: u64) -> Result<(ModelConfig, TrainConfig)> {
        let mut m = ModelConfig {
            hp: match self.profile {
                Profile::Coco => Hyperparams::coco(),
                Profile::Nus => Hyperparams::nus_wide(),
            },
            ..ModelConfig::default()
        };
        let mut t = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if let Some(v) = self.r {
            m.code_len = v;
        }
        if let Some(v) = self.d_prime {
            m.d_prime = v;
        }
        if let Some(v) = self.hidden {
            m.hidden = v;
        }
        if let Some(v) = self.lambda1 {
            m.hp.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            m.hp.lambda2 = v;
        }
        if let Some(v) = self.lambda3 {
            m.hp.lambda3 = v;
        }
        if let Some(v) = self.k_scale {
            m.hp.k = v;
        }
        if let Some(v) = self.mu {
            m.graph.mu = v;
        }
        if let Some(v) = self.sigma {
            m.graph.bandwidth = Bandwidth::Fixed(v);
        }
        if self.saturating {
            m.hp.adversarial = AdversarialForm::Saturating;
        }
        m.joint_attention = self.joint_attention;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.disc_steps {
            t.disc_steps_per_gen_step = v;
        }
        t.batch = self.batch;
        let m = self.variant.apply(m);
        m.validate()?;
        t.validate()?;
        Ok((m, t))
    }
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory for the checkpoint, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Query,
    Retrieval,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub aux: PathBuf,
    /// With a split, `--subset` picks the items and training items reuse
    /// their cached codes.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    pub subset: Subset,
    /// Expected code length; must match the checkpoint.
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MetricArgs {
    #[arg(long, default_value_t = 1000)]
    pub k: usize,
    /// Comma-separated cut-offs of the precision curve.
    #[arg(long, value_delimiter = ',', default_value = "100,200,500,1000")]
    pub curve: Vec<usize>,
    #[arg(long, value_enum, default_value_t = DenomArg::MinRk)]
    pub ap_denominator: DenomArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DenomArg {
    MinRk,
    Retrieved,
}

impl MetricArgs {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            k: self.k,
            curve_points: self.curve.clone(),
            denominator: match self.ap_denominator {
                DenomArg::MinRk => ApDenominator::MinRk,
                DenomArg::Retrieved => ApDenominator::Retrieved,
            },
        }
    }
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub query_codes: PathBuf,
    #[arg(long)]
    pub db_codes: PathBuf,
    /// Labels of the query items, in code-file order.
    #[arg(long, requires = "db_labels", conflicts_with_all = ["labels", "split"])]
    pub query_labels: Option<PathBuf>,
    #[arg(long)]
    pub db_labels: Option<PathBuf>,
    /// Labels of the whole dataset, subset through `--split`.
    #[arg(long, requires = "split")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Output directory for the report and curve.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Epochs,
    Lambda1,
    Lambda2,
    Lambda3,
    R,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values of the swept parameter.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Run sweep points in parallel.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: String,
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl RunManifest {
    fn start(command: &str, argv: &[String], seed: u64, config: serde_json::Value, inputs: &[(&str, &Path)]) -> Result<Self> {
        let mut digests = BTreeMap::new();
        for (name, path) in inputs {
            digests.insert((*name).to_string(), file_digest(path)?);
        }
        Ok(Self {
            command: command.into(),
            argv: argv.to_vec(),
            config,
            inputs: digests,
            outputs: BTreeMap::new(),
            seed,
            version: crate::VERSION.into(),
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".into(),
            extra: BTreeMap::new(),
        })
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn finish(&mut self, path: &Path, outputs: &[(&str, &Path)]) -> Result<()> {
        for (name, p) in outputs {
            self.outputs.insert((*name).to_string(), file_digest(p)?);
        }
        self.finished_unix = Some(unix_now());
        self.status = "ok".into();
        self.write(path)
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn file_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces

pub fn load_features_auto(path: &Path) -> Result<FeatureMatrix> {
    load_features(path, FeatureFormat::from_path(path))
}

/// Features and semantics of the training items.
pub fn training_data(
    features: &FeatureMatrix,
    aux: &AuxSemantics,
    split: Option<&DatasetSplit>,
) -> Result<(FeatureMatrix, AuxSemantics)> {
    aux.check_paired(features)?;
    match split {
        Some(s) => {
            s.validate(features.len())?;
            if s.train.is_empty() {
                return Err(Error::Parameter("the split has no training items".into()));
            }
            Ok((features.select(&s.train)?, aux.select(&s.train)?))
        }
        None => Ok((features.clone(), aux.clone())),
    }
}

/// Encodes the query and retrieval sets of `split` and scores them with
/// the ground-truth `labels`.
pub fn evaluate_on_split(
    model: &TrainedModel,
    features: &FeatureMatrix,
    aux: &AuxSemantics,
    labels: &AuxSemantics,
    split: &DatasetSplit,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let q = model.encode_subset(features, aux, &split.train, &split.query)?;
    let db = model.encode_subset(features, aux, &split.train, &split.retrieval)?;
    let encode_seconds = t0.elapsed().as_secs_f64();
    let mut report = evaluate(&q, &db, &labels.select(&split.query)?, &labels.select(&split.retrieval)?, opts)?;
    report.timing.encode_seconds = encode_seconds;
    Ok(report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_synth(cli: &Cli, a: &SynthArgs, argv: &[String]) -> Result<()> {
    if !a.out.is_dir() {
        return Err(Error::Io {
            path: a.out.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        });
    }
    let p = SynthParams {
        n: a.n,
        d: a.d,
        clusters: a.clusters,
        sep: a.sep,
        label_noise: a.label_noise,
        seed: cli.seed,
    };
    let config = serde_json::json!({
        "n": a.n, "d": a.d, "clusters": a.clusters, "sep": a.sep,
        "label_noise": a.label_noise, "train": a.train, "query": a.query,
        "format": format!("{:?}", a.format).to_lowercase(),
    });
    let manifest_path = a.out.join("manifest.json");
    let mut manifest = RunManifest::start("synth", argv, cli.seed, config, &[])?;
    manifest.write(&manifest_path)?;

    let data = synth_dataset(&p)?;
    let split = make_split(a.n, a.train, a.query, cli.seed)?;
    let (fmt, name) = match a.format {
        FormatArg::Text => (FeatureFormat::TextCsv, "features.csv"),
        FormatArg::Binary => (FeatureFormat::RawBinary, "features.bin"),
    };
    let features = a.out.join(name);
    let aux = a.out.join("aux.csv");
    let labels = a.out.join("labels.csv");
    let split_path = a.out.join("split.json");
    write_features(&features, &data.features, fmt)?;
    write_aux(&aux, &data.aux)?;
    write_aux(&labels, &data.label_matrix())?;
    split.save(&split_path)?;
    manifest.extra.insert(
        "shapes".into(),
        serde_json::json!({
            "features": [a.d, a.n], "aux": [a.clusters, a.n], "labels": [a.clusters, a.n],
            "split": [split.train.len(), split.query.len(), split.retrieval.len()],
        }),
    );
    manifest.finish(
        &manifest_path,
        &[("features", &features), ("aux", &aux), ("labels", &labels), ("split", &split_path)],
    )
}

fn config_json(m: &ModelConfig, t: &TrainConfig) -> serde_json::Value {
    serde_json::json!({ "model": m, "train": t })
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs, argv: &[String]) -> Result<()> {
    let (mcfg, tcfg) = a.model.resolve(cli.seed)?;
    ensure_dir(&a.out)?;
    let mut inputs = vec![("features", a.data.features.as_path()), ("aux", a.data.aux.as_path())];
    if let Some(s) = &a.data.split {
        inputs.push(("split", s.as_path()));
    }
    let manifest_path = a.out.join("manifest.json");
    let mut manifest = RunManifest::start("train", argv, cli.seed, config_json(&mcfg, &tcfg), &inputs)?;
    manifest.extra.insert("variant".into(), serde_json::json!(a.model.variant.name()));
    manifest.write(&manifest_path)?;

    let features = load_features_auto(&a.data.features)?;
    let aux = load_aux(&a.data.aux)?;
    let split = a.data.split.as_deref().map(DatasetSplit::load).transpose()?;
    let (f, y) = training_data(&features, &aux, split.as_ref())?;
    let t0 = Instant::now();
    let mut trainer = Trainer::new(&f, &y, &mcfg, &tcfg)?;
    let log_path = a.out.join("train_log.csv");
    let result = trainer.run();
    // keep the epochs that did complete
    write_text(&log_path, &training_log_csv(trainer.log()))?;
    result?;
    let model = trainer.snapshot()?;
    let ckpt = a.out.join("model.ckpt");
    model.save(&ckpt)?;
    let secs = t0.elapsed().as_secs_f64();
    info!("trained {} epochs in {secs:.2}s", tcfg.epochs);
    manifest.extra.insert("sigma".into(), serde_json::json!(model.sigma));
    manifest.extra.insert("train_seconds".into(), serde_json::json!(secs));
    manifest.finish(&manifest_path, &[("checkpoint", &ckpt), ("log", &log_path)])
}

fn subset_indices(split: &DatasetSplit, subset: Subset, n: usize) -> Vec<usize> {
    match subset {
        Subset::All => (0..n).collect(),
        Subset::Train => split.train.clone(),
        Subset::Query => split.query.clone(),
        Subset::Retrieval => split.retrieval.clone(),
    }
}

pub fn cmd_encode(cli: &Cli, a: &EncodeArgs, argv: &[String]) -> Result<()> {
    let model = TrainedModel::load(&a.model)?;
    if let Some(r) = a.r {
        if r != model.code_len() {
            return Err(Error::Config(format!(
                "requested {r}-bit codes but the checkpoint has {} bits",
                model.code_len()
            )));
        }
    }
    let mut inputs = vec![
        ("model", a.model.as_path()),
        ("features", a.features.as_path()),
        ("aux", a.aux.as_path()),
    ];
    if let Some(s) = &a.split {
        inputs.push(("split", s.as_path()));
    }
    let config = serde_json::json!({ "subset": format!("{:?}", a.subset).to_lowercase(), "r": model.code_len() });
    let manifest_path = file_manifest_path(&a.out);
    let mut manifest = RunManifest::start("encode", argv, cli.seed, config, &inputs)?;
    manifest.write(&manifest_path)?;

    let features = load_features_auto(&a.features)?;
    let aux = load_aux(&a.aux)?;
    let t0 = Instant::now();
    let codes = match &a.split {
        Some(path) => {
            let split = DatasetSplit::load(path)?;
            split.validate(features.len())?;
            let subset = subset_indices(&split, a.subset, features.len());
            model.encode_subset(&features, &aux, &split.train, &subset)?
        }
        None => {
            if a.subset != Subset::All {
                return Err(Error::Config("--subset needs --split".into()));
            }
            model.encode(&features, &aux)?
        }
    };
    let secs = t0.elapsed().as_secs_f64();
    eprintln!("encoded {} items in {secs:.4}s", codes.len());
    codes.save(&a.out)?;
    manifest.extra.insert("encode_seconds".into(), serde_json::json!(secs));
    manifest.finish(&manifest_path, &[("codes", &a.out)])
}

pub fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    ensure_dir(&a.out)?;
    let mut inputs = vec![("query_codes", a.query_codes.as_path()), ("db_codes", a.db_codes.as_path())];
    for (name, p) in [("query_labels", &a.query_labels), ("db_labels", &a.db_labels), ("labels", &a.labels), ("split", &a.split)] {
        if let Some(p) = p {
            inputs.push((name, p.as_path()));
        }
    }
    let opts = a.metrics.options();
    let config = serde_json::json!({
        "k": opts.k, "curve": opts.curve_points, "ap_denominator": opts.denominator,
    });
    let manifest_path = a.out.join("manifest.json");
    let mut manifest = RunManifest::start("evaluate", argv, cli.seed, config, &inputs)?;
    manifest.write(&manifest_path)?;

    let q = HashCodes::load(&a.query_codes)?;
    let db = HashCodes::load(&a.db_codes)?;
    let (ql, dl) = match (&a.query_labels, &a.db_labels, &a.labels, &a.split) {
        (Some(ql), Some(dl), _, _) => (load_labels(ql)?, load_labels(dl)?),
        (_, _, Some(l), Some(s)) => {
            let labels = load_labels(l)?;
            let split = DatasetSplit::load(s)?;
            split.validate(labels.len())?;
            (labels.select(&split.query)?, labels.select(&split.retrieval)?)
        }
        _ => return Err(Error::Config("give --query-labels/--db-labels or --labels with --split".into())),
    };
    let report = evaluate(&q, &db, &ql, &dl, &opts)?;
    let report_path = a.out.join("report.json");
    let curve_path = a.out.join("curve.csv");
    write_text(&report_path, &(report.to_json() + "\n"))?;
    write_text(&curve_path, &report.curve_csv())?;
    println!("MAP@{} = {:.6}", report.k, report.map_at_k);
    manifest.finish(&manifest_path, &[("report", &report_path), ("curve", &curve_path)])
}

fn apply_axis(axis: Axis, value: f64, m: &mut ModelConfig, t: &mut TrainConfig) -> Result<()> {
    let as_count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Parameter(format!("sweep value {v} must be a positive integer")))
        }
    };
    match axis {
        Axis::Epochs => t.epochs = as_count(value)?,
        Axis::R => m.code_len = as_count(value)?,
        Axis::Lambda1 => m.hp.lambda1 = value,
        Axis::Lambda2 => m.hp.lambda2 = value,
        Axis::Lambda3 => m.hp.lambda3 = value,
    }
    m.validate()?;
    t.validate()
}

/// MAP at each swept value. An epochs sweep trains once and evaluates
/// snapshots along the way, which matches separate runs exactly.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    axis: Axis,
    values: &[f64],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    features: &FeatureMatrix,
    aux: &AuxSemantics,
    labels: &AuxSemantics,
    split: &DatasetSplit,
    opts: &EvalOptions,
    parallel: bool,
) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Parameter("empty sweep value list".into()));
    }
    let (f, y) = training_data(features, aux, Some(split))?;
    if axis == Axis::Epochs {
        let mut epochs = Vec::with_capacity(values.len());
        for &v in values {
            let (mut m, mut t) = (*mcfg, *tcfg);
            apply_axis(axis, v, &mut m, &mut t)?;
            epochs.push(t.epochs);
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by_key(|&i| epochs[i]);
        let max = *epochs.iter().max().expect("nonempty");
        let mut trainer = Trainer::new(&f, &y, mcfg, &TrainConfig { epochs: max, ..*tcfg })?;
        let mut out = vec![0.0; values.len()];
        for i in order {
            while trainer.epoch() < epochs[i] {
                trainer.step()?;
            }
            let model = trainer.snapshot()?;
            out[i] = evaluate_on_split(&model, features, aux, labels, split, opts)?.map_at_k;
            info!("epochs = {}: MAP {:.4}", epochs[i], out[i]);
        }
        return Ok(values.iter().copied().zip(out).collect());
    }
    let point = |v: f64| -> Result<(f64, f64)> {
        let (mut m, mut t) = (*mcfg, *tcfg);
        apply_axis(axis, v, &mut m, &mut t)?;
        let mut trainer = Trainer::new(&f, &y, &m, &t)?;
        trainer.run()?;
        let model = trainer.snapshot()?;
        let map = evaluate_on_split(&model, features, aux, labels, split, opts)?.map_at_k;
        info!("{axis:?} = {v}: MAP {map:.4}");
        Ok((v, map))
    };
    if parallel {
        values.par_iter().map(|&v| point(v)).collect()
    } else {
        values.iter().map(|&v| point(v)).collect()
    }
}

pub fn cmd_sweep(cli: &Cli, a: &SweepArgs, argv: &[String]) -> Result<()> {
    let (mcfg, tcfg) = a.model.resolve(cli.seed)?;
    let split_path = a
        .data
        .split
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs --split".into()))?;
    ensure_dir(&a.out)?;
    let inputs = [
        ("features", a.data.features.as_path()),
        ("aux", a.data.aux.as_path()),
        ("labels", a.labels.as_path()),
        ("split", split_path.as_path()),
    ];
    let mut config = config_json(&mcfg, &tcfg);
    config["axis"] = serde_json::json!(format!("{:?}", a.axis).to_lowercase());
    config["values"] = serde_json::json!(a.values);
    let manifest_path = a.out.join("manifest.json");
    let mut manifest = RunManifest::start("sweep", argv, cli.seed, config, &inputs)?;
    manifest.write(&manifest_path)?;

    let features = load_features_auto(&a.data.features)?;
    let aux = load_aux(&a.data.aux)?;
    let labels = load_labels(&a.labels)?;
    let split = DatasetSplit::load(split_path)?;
    let rows = run_sweep(
        a.axis,
        &a.values,
        &mcfg,
        &tcfg,
        &features,
        &aux,
        &labels,
        &split,
        &a.metrics.options(),
        a.parallel,
    )?;
    let mut csv = String::from("value,MAP\n");
    for (v, map) in rows {
        csv.push_str(&format!("{v},{map}\n"));
    }
    let table = a.out.join("sweep.csv");
    write_text(&table, &csv)?;
    manifest.finish(&manifest_path, &[("table", &table)])
}

// ---------------------------------------------------------------------------
// Entry point

/// Turns `key=value` lines into trailing `--key=value` flags. `true` and
/// `false` toggle switches.
pub fn config_file_args(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            _ => out.push(format!("--{key}={value}")),
        }
    }
    Ok(out)
}

fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if a == "--config" {
            path = argv.get(i + 1).cloned();
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut argv = argv;
    argv.extend(config_file_args(&text)?);
    Ok(argv)
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            warn!("thread pool already configured: {e}");
        }
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a, argv),
        Command::Train(a) => cmd_train(cli, a, argv),
        Command::Encode(a) => cmd_encode(cli, a, argv),
        Command::Evaluate(a) => cmd_evaluate(cli, a, argv),
        Command::Sweep(a) => cmd_sweep(cli, a, argv),
    }
}

/// Process entry point; returns the exit status.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
