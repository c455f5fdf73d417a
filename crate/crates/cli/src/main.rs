//! `mde`: train toy models, generate data, score drift, select models and run
//! the desk-scale shift experiments.
//!
//! Machine-readable output is CSV on stdout or in `--out-dir`; logs go to
//! stderr. Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 model and data
//! are incompatible (including models without BN layers).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use mde_core::drift::{fake_data, score_activations, DriftConfig, DriftReport, Metric};
use mde_core::experiments::{
    concept_sweep, covariate_sweep, drift_on, recovery_run, train_default, ConceptConfig,
    CovariateConfig, RecoveryConfig, ShiftKind,
};
use mde_core::mdet::{
    bn_states_from_record, dataset_from_record, model_from_record, model_record, read_mdet,
    synthetic_dataset_record, trace_activations, write_mdet, MdetRecord, RecordKind,
};
use mde_core::net::{evaluate, ToyModel, TrainConfig};
use mde_core::select::{select_model, write_cycle_csv, CandidateScore};
use mde_core::shift::{apply_shift, generate_dataset};
use mde_core::tensor::Tensor4;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("incompatible input: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Core(#[from] mde_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Incompatible(_) | CliError::Core(mde_core::Error::NoBnLayers) => 3,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "mde",
    version,
    about = "Model drift estimation from batch-normalization statistics"
)]
struct Cli {
    /// Seed for data generation, training and batch sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for report files; relative output paths resolve against it.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the default toy network on synthetic data and write a model file.
    ///
    /// Prints `model_id,classes,train_accuracy`.
    TrainToy(TrainToyArgs),
    /// Write a synthetic dataset file, optionally shifted.
    ///
    /// Uses the same generator as train-toy, so equal flags and seed
    /// reproduce a model's training data.
    GenData(GenDataArgs),
    /// Score one model against a dataset or activation trace.
    ///
    /// Columns: model_id, dataset_id, metric, truncation, layer, drift,
    /// channels_skipped. One row per BN layer, then `aggregate`, then
    /// `fake_normalized` with --fake-normalize.
    Score(ScoreArgs),
    /// Rank every model in a directory by drift and pick the smallest.
    ///
    /// Columns: rank, model_id, drift, accuracy, chosen. Rows are in rank
    /// order, so the first row holds the chosen model. Accuracy is empty
    /// unless the data carries labels and every model is runnable.
    Select(SelectArgs),
    /// Run a desk-scale experiment and write its CSV bundle.
    ///
    /// Writes `<experiment>.csv` and `<experiment>_summary.csv` into
    /// --out-dir (default: current directory) and prints the summary.
    Simulate {
        #[command(subcommand)]
        experiment: Experiment,
    },
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 150)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Retain factor of the BN running estimates.
    #[arg(long, default_value_t = mde_core::bn::DEFAULT_RETAIN_ALPHA)]
    alpha: f64,
    #[arg(long, default_value = "toy")]
    model_id: String,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 150)]
    samples_per_class: usize,
    /// Keep only these classes (comma separated).
    #[arg(long, value_delimiter = ',')]
    keep: Option<Vec<usize>>,
    /// noise, rotation, brightness or cutout.
    #[arg(long, requires = "level")]
    shift: Option<String>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long, default_value = "synthetic")]
    dataset_id: String,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args, Default)]
struct DriftArgs {
    /// cosine, wasserstein or kl.
    #[arg(long)]
    metric: Option<String>,
    /// Fraction of singular values kept when refining BN inputs.
    #[arg(long)]
    truncation: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Number of batches scored.
    #[arg(long)]
    iters: Option<usize>,
    /// Per-layer weights in [0, 1] (comma separated).
    #[arg(long, value_delimiter = ',')]
    layer_weights: Option<Vec<f64>>,
}

impl DriftArgs {
    fn apply(&self, mut cfg: DriftConfig) -> CliResult<DriftConfig> {
        if let Some(m) = &self.metric {
            cfg.metric = m.parse::<Metric>().map_err(usage)?;
        }
        if self.truncation.is_some() {
            cfg.truncation_ratio = self.truncation;
        }
        if let Some(b) = self.batch {
            cfg.batch_size = b;
        }
        if let Some(t) = self.iters {
            cfg.iterations = t;
        }
        if self.layer_weights.is_some() {
            cfg.layer_weights = self.layer_weights.clone();
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset or trace file.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    drift: DriftArgs,
    /// Divide the aggregate by the same model's FakeData drift.
    #[arg(long)]
    fake_normalize: bool,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Directory of model files (`*.mdet`).
    #[arg(long)]
    zoo: PathBuf,
    /// Dataset or trace file.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    drift: DriftArgs,
}

#[derive(Debug, Subcommand)]
enum Experiment {
    /// Drift and accuracy over increasing perturbation severity.
    ///
    /// Per-level columns: level, accuracy, drift. Summary columns:
    /// train_accuracy, rho_severity_drift, rho_drift_accuracy.
    Covariate {
        /// noise, rotation, brightness or cutout.
        #[arg(long, default_value = "noise")]
        kind: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.4, 0.8])]
        levels: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[command(flatten)]
        drift: DriftArgs,
    },
    /// Overlapping-class test: drift against the train/test accuracy gap.
    ///
    /// Per-level columns: overlap, shared_classes, train_accuracy,
    /// test_accuracy, accuracy_gap, drift, baseline_drift. Summary columns:
    /// fake_drift, rho_drift_gap, slope, intercept, r_squared (fit fields
    /// stay empty below three levels).
    Concept {
        #[arg(long = "overlap", value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
        overlaps: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        classes_per_split: usize,
        #[arg(long, default_value_t = 200)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[command(flatten)]
        drift: DriftArgs,
    },
    /// Disjoint-class experts selected by drift over a revisiting stream.
    ///
    /// Per-cycle columns: cycle, model_id, drift, accuracy, rank, chosen.
    /// Summary columns: cycles, top1_rate, top3_rate, top5_rate,
    /// mean_regret, random_regret, drift_accuracy_rho.
    Recovery {
        #[arg(long, default_value_t = 5)]
        experts: usize,
        #[arg(long, default_value_t = 2)]
        classes_per_expert: usize,
        #[arg(long, default_value_t = 25)]
        cycles: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[command(flatten)]
        drift: DriftArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let ctx = Context {
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::TrainToy(a) => train_toy(&ctx, a),
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::Select(a) => select(&ctx, a),
        Command::Simulate { experiment } => simulate(&ctx, experiment),
    }
}

/// `MDE_THREADS` caps the scoring thread pool; 0 or unset means automatic.
fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("MDE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| usage(format!("MDE_THREADS must be a thread count, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

struct Context {
    seed: u64,
    out_dir: Option<PathBuf>,
}

impl Context {
    fn resolve(&self, path: &Path) -> PathBuf {
        match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    fn create_out_dir(&self) -> CliResult<PathBuf> {
        let dir = self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(dir)
    }
}

fn load(path: &Path) -> CliResult<MdetRecord> {
    Ok(read_mdet(path)?)
}

fn save(record: &MdetRecord, path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    Ok(write_mdet(record, path)?)
}

fn train_toy(ctx: &Context, a: TrainToyArgs) -> CliResult<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        momentum_alpha: a.alpha,
        seed: ctx.seed,
    };
    cfg.validate().map_err(usage)?;
    if a.classes < 2 || a.samples_per_class == 0 {
        return Err(usage("need at least two classes with one sample each"));
    }
    let data = generate_dataset(a.classes, a.samples_per_class, ctx.seed)?;
    info!("training on {} samples", data.len());
    let model = train_default(&data, &cfg, ctx.seed)?;
    let accuracy = evaluate(&model, &data.images, &data.labels)?.accuracy;
    save(&model_record(&model, &a.model_id)?, &ctx.resolve(&a.output))?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    write_rows(
        &mut w,
        ["model_id", "classes", "train_accuracy"],
        [[a.model_id, a.classes.to_string(), accuracy.to_string()]],
    )
}

fn gen_data(ctx: &Context, a: GenDataArgs) -> CliResult<()> {
    if a.classes == 0 || a.samples_per_class == 0 {
        return Err(usage("need at least one class with one sample"));
    }
    let shift = match (&a.shift, a.level) {
        (Some(kind), Some(level)) => Some(
            kind.parse::<ShiftKind>()
                .map_err(usage)?
                .spec(level)
                .map_err(usage)?,
        ),
        _ => None,
    };
    if let Some(s) = &shift {
        s.validate().map_err(usage)?;
    }
    let mut data = generate_dataset(a.classes, a.samples_per_class, ctx.seed)?;
    if let Some(keep) = &a.keep {
        if let Some(&bad) = keep.iter().find(|&&k| k >= a.classes) {
            return Err(usage(format!(
                "class {bad} out of range for {} classes",
                a.classes
            )));
        }
        data = data.with_classes(keep)?;
    }
    if let Some(s) = &shift {
        data.images = apply_shift(&data.images, s, ctx.seed.wrapping_add(1))?;
    }
    save(
        &synthetic_dataset_record(&data, &a.dataset_id, ctx.seed)?,
        &ctx.resolve(&a.output),
    )
}

/// BN states plus, when the record carries an architecture, a runnable model.
struct LoadedModel {
    id: String,
    states: Vec<mde_core::bn::BnLayerState>,
    runnable: Option<ToyModel>,
}

fn load_model(path: &Path) -> CliResult<LoadedModel> {
    let record = load(path)?;
    if record.kind != RecordKind::Model {
        return Err(CliError::Incompatible(format!(
            "{} is not a model file",
            path.display()
        )));
    }
    let states = bn_states_from_record(&record)?;
    if states.is_empty() {
        return Err(mde_core::Error::NoBnLayers.into());
    }
    let runnable = match record.architecture {
        Some(_) => Some(model_from_record(&record)?),
        None => None,
    };
    let id = if record.metadata.model_id.is_empty() {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    } else {
        record.metadata.model_id
    };
    Ok(LoadedModel {
        id,
        states,
        runnable,
    })
}

enum Data {
    Images {
        id: String,
        images: Tensor4,
        labels: Option<Vec<usize>>,
    },
    Trace {
        id: String,
        batches: Vec<Vec<Tensor4>>,
    },
}

impl Data {
    fn id(&self) -> &str {
        match self {
            Data::Images { id, .. } | Data::Trace { id, .. } => id,
        }
    }
}

fn load_data(path: &Path) -> CliResult<Data> {
    let record = load(path)?;
    let id = if record.metadata.dataset_id.is_empty() {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    } else {
        record.metadata.dataset_id.clone()
    };
    match record.kind {
        RecordKind::Dataset => {
            let (images, labels) = dataset_from_record(&record)?;
            Ok(Data::Images { id, images, labels })
        }
        RecordKind::Trace => Ok(Data::Trace {
            id,
            batches: trace_activations(&record)?,
        }),
        RecordKind::Model => Err(CliError::Incompatible(format!(
            "{} is a model file, not data",
            path.display()
        ))),
    }
}

fn runnable<'a>(m: &'a LoadedModel, why: &str) -> CliResult<&'a ToyModel> {
    m.runnable
        .as_ref()
        .ok_or_else(|| CliError::Incompatible(format!("model {} has no architecture; {why}", m.id)))
}

fn score_one(m: &LoadedModel, data: &Data, cfg: &DriftConfig, seed: u64) -> CliResult<DriftReport> {
    match data {
        Data::Images { id, images, .. } => {
            let model = runnable(m, "image data needs a runnable model")?;
            let expected = model.input_shape();
            let got = [images.channels(), images.height(), images.width()];
            if got != expected {
                return Err(CliError::Incompatible(format!(
                    "model {} expects inputs {expected:?}, data has {got:?}",
                    m.id
                )));
            }
            if cfg.batch_size > images.batch() {
                warn!(
                    "batch size {} exceeds the {} samples available",
                    cfg.batch_size,
                    images.batch()
                );
            }
            Ok(drift_on(model, images, cfg, seed, (&m.id, id))?)
        }
        Data::Trace { id, batches } => {
            for layers in batches {
                let channels: Vec<usize> = layers.iter().map(Tensor4::channels).collect();
                let expected: Vec<usize> = m.states.iter().map(|s| s.channels()).collect();
                if channels != expected {
                    return Err(CliError::Incompatible(format!(
                        "trace layer channels {channels:?} do not match model {} BN channels {expected:?}",
                        m.id
                    )));
                }
            }
            info!("scoring all {} traced batches", batches.len());
            Ok(score_activations(&m.states, batches, cfg, &m.id, id)?)
        }
    }
}

fn score(ctx: &Context, a: ScoreArgs) -> CliResult<()> {
    let cfg = a.drift.apply(DriftConfig::default())?;
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let report = score_one(&model, &data, &cfg, ctx.seed)?;
    let mut rows: Vec<[String; 7]> = report.csv_rows();
    if a.fake_normalize {
        let runner = runnable(&model, "FakeData scoring needs a runnable model")?;
        let [c, h, w] = runner.input_shape();
        let fake = fake_data([cfg.batch_size * cfg.iterations, c, h, w], ctx.seed);
        let fake_report = drift_on(runner, &fake, &cfg, ctx.seed, (&model.id, "fakedata"))?;
        let ratio = mde_core::drift::normalize_by_fakedata(&report, &fake_report)?;
        let mut row = rows.last().cloned().unwrap_or_default();
        row[4] = "fake_normalized".into();
        row[5] = ratio.to_string();
        rows.push(row);
    }
    emit(ctx, "score.csv", DriftReport::CSV_HEADER, rows)
}

fn select(ctx: &Context, a: SelectArgs) -> CliResult<()> {
    let cfg = a.drift.apply(DriftConfig::default())?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.zoo)
        .map_err(|source| CliError::Io {
            path: a.zoo.clone(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mdet"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!(
            "no .mdet model files in {}",
            a.zoo.display()
        )));
    }
    let data = load_data(&a.data)?;
    let models = paths
        .iter()
        .map(|p| load_model(p))
        .collect::<CliResult<Vec<_>>>()?;

    let labelled = match &data {
        Data::Images {
            images,
            labels: Some(l),
            ..
        } if models.iter().all(|m| m.runnable.is_some()) => Some((images, l)),
        _ => None,
    };
    let candidates = models
        .iter()
        .map(|m| {
            let drift = score_one(m, &data, &cfg, ctx.seed)?.aggregate;
            let accuracy = match labelled {
                Some((images, labels)) => {
                    Some(evaluate(runnable(m, "")?, images, labels)?.accuracy)
                }
                None => None,
            };
            Ok(CandidateScore::new(m.id.clone(), drift, accuracy))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let outcome = select_model(&candidates)?;
    info!("chose {} for {}", outcome.chosen, data.id());
    let rows = outcome.ranking.iter().enumerate().map(|(r, id)| {
        let c = candidates
            .iter()
            .find(|c| &c.model_id == id)
            .expect("ranked ids come from candidates");
        [
            (r + 1).to_string(),
            id.clone(),
            c.drift.to_string(),
            c.true_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            (id == &outcome.chosen).to_string(),
        ]
    });
    emit(
        ctx,
        "selection.csv",
        ["rank", "model_id", "drift", "accuracy", "chosen"],
        rows,
    )
}

fn simulate(ctx: &Context, experiment: Experiment) -> CliResult<()> {
    let train = |epochs: usize| -> CliResult<TrainConfig> {
        let t = TrainConfig {
            epochs,
            ..TrainConfig::default()
        };
        t.validate().map_err(usage)?;
        Ok(t)
    };
    match experiment {
        Experiment::Covariate {
            kind,
            levels,
            classes,
            epochs,
            drift,
        } => {
            let base = CovariateConfig::default();
            let kind: ShiftKind = kind.parse().map_err(usage)?;
            for &l in &levels {
                kind.spec(l).and_then(|s| s.validate()).map_err(usage)?;
            }
            let cfg = CovariateConfig {
                kind,
                levels,
                class_count: classes,
                train: train(epochs)?,
                drift: drift.apply(base.drift.clone())?,
                seed: ctx.seed,
                ..base
            };
            let r = covariate_sweep(&cfg)?;
            info!("train accuracy {:.4}", r.train_accuracy);
            let dir = ctx.create_out_dir()?;
            let rows = r.points.iter().map(|p| {
                [
                    p.level.to_string(),
                    p.accuracy.to_string(),
                    p.drift.to_string(),
                ]
            });
            write_file(
                &dir.join("covariate.csv"),
                ["level", "accuracy", "drift"],
                rows,
            )?;
            summary(
                &dir.join("covariate_summary.csv"),
                ["train_accuracy", "rho_severity_drift", "rho_drift_accuracy"],
                [
                    r.train_accuracy.to_string(),
                    r.rho_severity_drift.to_string(),
                    r.rho_drift_accuracy.to_string(),
                ],
            )
        }
        Experiment::Concept {
            overlaps,
            classes,
            classes_per_split,
            samples_per_class,
            epochs,
            drift,
        } => {
            let base = ConceptConfig::default();
            let cfg = ConceptConfig {
                overlaps,
                class_count: classes,
                classes_per_split,
                samples_per_class,
                train: train(epochs)?,
                drift: drift.apply(base.drift.clone())?,
                seed: ctx.seed,
            };
            for &p in &cfg.overlaps {
                mde_core::shift::OverlapSpec {
                    total_classes: classes,
                    classes_per_split,
                    overlap_probability: p,
                    seed: ctx.seed,
                }
                .validate()
                .map_err(usage)?;
            }
            let r = concept_sweep(&cfg)?;
            let dir = ctx.create_out_dir()?;
            let rows = r.points.iter().map(|p| {
                [
                    p.overlap.to_string(),
                    p.shared_classes.to_string(),
                    p.train_accuracy.to_string(),
                    p.test_accuracy.to_string(),
                    p.accuracy_gap.to_string(),
                    p.drift.to_string(),
                    p.baseline_drift.to_string(),
                ]
            });
            write_file(
                &dir.join("concept.csv"),
                [
                    "overlap",
                    "shared_classes",
                    "train_accuracy",
                    "test_accuracy",
                    "accuracy_gap",
                    "drift",
                    "baseline_drift",
                ],
                rows,
            )?;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let f = r.fit.as_ref();
            summary(
                &dir.join("concept_summary.csv"),
                [
                    "fake_drift",
                    "rho_drift_gap",
                    "slope",
                    "intercept",
                    "r_squared",
                ],
                [
                    r.fake_drift.to_string(),
                    opt(r.rho_drift_gap),
                    opt(f.map(|f| f.slope)),
                    opt(f.map(|f| f.intercept)),
                    opt(f.map(|f| f.r_squared)),
                ],
            )
        }
        Experiment::Recovery {
            experts,
            classes_per_expert,
            cycles,
            epochs,
            drift,
        } => {
            if experts == 0
                || classes_per_expert == 0
                || cycles == 0
                || experts * classes_per_expert < 2
            {
                return Err(usage(
                    "need at least one cycle and two classes spread over the experts",
                ));
            }
            let base = RecoveryConfig::default();
            let cfg = RecoveryConfig {
                experts,
                classes_per_expert,
                cycles,
                train: train(epochs)?,
                drift: drift.apply(base.drift.clone())?,
                seed: ctx.seed,
                ..base
            };
            let r = recovery_run(&cfg)?;
            let dir = ctx.create_out_dir()?;
            let path = dir.join("recovery.csv");
            let mut w = csv::Writer::from_path(&path).map_err(mde_core::Error::from)?;
            write_cycle_csv(&r.outcomes, &mut w)?;
            let s = &r.summary;
            summary(
                &dir.join("recovery_summary.csv"),
                [
                    "cycles",
                    "top1_rate",
                    "top3_rate",
                    "top5_rate",
                    "mean_regret",
                    "random_regret",
                    "drift_accuracy_rho",
                ],
                [
                    s.cycles.to_string(),
                    s.top1_rate.to_string(),
                    s.top3_rate.to_string(),
                    s.top5_rate.to_string(),
                    s.mean_regret.to_string(),
                    s.random_regret.to_string(),
                    s.drift_accuracy_rho
                        .map(|x| x.to_string())
                        .unwrap_or_default(),
                ],
            )
        }
    }
}

fn write_rows<W, const N: usize>(
    w: &mut csv::Writer<W>,
    header: [&str; N],
    rows: impl IntoIterator<Item = [String; N]>,
) -> CliResult<()>
where
    W: std::io::Write,
{
    let csv_err = |e: csv::Error| CliError::Core(e.into());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))
}

fn write_file<const N: usize>(
    path: &Path,
    header: [&str; N],
    rows: impl IntoIterator<Item = [String; N]>,
) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(mde_core::Error::from)?;
    write_rows(&mut w, header, rows)
}

/// Writes a one-row summary file and echoes it on stdout.
fn summary<const N: usize>(path: &Path, header: [&str; N], row: [String; N]) -> CliResult<()> {
    write_file(path, header, [row.clone()])?;
    write_rows(
        &mut csv::Writer::from_writer(std::io::stdout()),
        header,
        [row],
    )
}

/// CSV to stdout, mirrored into `--out-dir` when one is given.
fn emit<const N: usize>(
    ctx: &Context,
    file: &str,
    header: [&str; N],
    rows: impl IntoIterator<Item = [String; N]>,
) -> CliResult<()> {
    let rows: Vec<[String; N]> = rows.into_iter().collect();
    if ctx.out_dir.is_some() {
        let dir = ctx.create_out_dir()?;
        write_file(&dir.join(file), header, rows.clone())?;
    }
    write_rows(
        &mut csv::Writer::from_writer(std::io::stdout()),
        header,
        rows,
    )
}
