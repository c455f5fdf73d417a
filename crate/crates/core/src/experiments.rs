//! Desk-scale shift experiments: severity sweeps, overlapping-class tests and
//! expert recovery over a cycling stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::drift::{fake_data, mde_score, DriftConfig, DriftReport, Metric};
use crate::error::{invalid, Result};
use crate::metrics::{linear_fit, spearman_rank_corr, LinearFit};
use crate::net::{evaluate, train, ToyModel, TrainConfig};
use crate::select::{run_concept_recovery, summarize, SelectionOutcome, SelectionSummary};
use crate::shift::{
    apply_shift, generate_dataset, overlapping_split, BatchStream, OverlapSpec, ShiftSpec,
    SyntheticDataset, IMAGE_SIZE,
};

/// Train/test split of one generated dataset; the first `train_per_class`
/// samples of every class go to training.
pub fn train_test_data(
    class_count: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let all = generate_dataset(class_count, train_per_class + test_per_class, seed)?;
    let cut = class_count * train_per_class;
    let train_idx: Vec<usize> = (0..cut).collect();
    let test_idx: Vec<usize> = (cut..all.len()).collect();
    Ok((all.subset(&train_idx)?, all.subset(&test_idx)?))
}

/// Default toy network trained on a dataset.
pub fn train_default(data: &SyntheticDataset, cfg: &TrainConfig, seed: u64) -> Result<ToyModel> {
    let model = ToyModel::default_for([1, IMAGE_SIZE, IMAGE_SIZE], data.class_count, seed)?;
    train(model, &data.images, &data.labels, cfg)
}

/// Drift of a model on batches drawn from `images`.
pub fn drift_on(
    model: &ToyModel,
    images: &crate::tensor::Tensor4,
    cfg: &DriftConfig,
    seed: u64,
    ids: (&str, &str),
) -> Result<DriftReport> {
    let batch = cfg.batch_size.min(images.batch());
    let cfg = DriftConfig {
        batch_size: batch,
        ..cfg.clone()
    };
    mde_score(
        model,
        BatchStream::new(images, batch, seed)?,
        &cfg,
        ids.0,
        ids.1,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    Noise,
    Rotation,
    Brightness,
    CutOut,
}

impl ShiftKind {
    pub fn spec(self, level: f64) -> Result<ShiftSpec> {
        Ok(match self {
            ShiftKind::Noise => ShiftSpec::GaussianNoise { sigma: level },
            ShiftKind::Rotation => ShiftSpec::Rotation { degrees: level },
            ShiftKind::Brightness => ShiftSpec::Brightness { delta: level },
            ShiftKind::CutOut => {
                if level < 0.0 || level.fract() != 0.0 {
                    return Err(invalid(format!(
                        "cut-out level must be a hole count, got {level}"
                    )));
                }
                ShiftSpec::CutOut {
                    holes: level as usize,
                    hole_size: 4,
                }
            }
        })
    }
}

impl std::str::FromStr for ShiftKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(ShiftKind::Noise),
            "rotation" => Ok(ShiftKind::Rotation),
            "brightness" => Ok(ShiftKind::Brightness),
            "cutout" => Ok(ShiftKind::CutOut),
            _ => Err(invalid(format!("unknown shift kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovariateConfig {
    pub kind: ShiftKind,
    pub levels: Vec<f64>,
    pub class_count: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub train: TrainConfig,
    pub drift: DriftConfig,
    pub seed: u64,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        Self {
            kind: ShiftKind::Noise,
            levels: vec![0.0, 0.1, 0.2, 0.4, 0.8],
            class_count: 4,
            train_per_class: 150,
            test_per_class: 128,
            train: TrainConfig::default(),
            drift: DriftConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub level: f64,
    pub accuracy: f64,
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateResult {
    pub train_accuracy: f64,
    pub points: Vec<SweepPoint>,
    pub rho_severity_drift: f64,
    pub rho_drift_accuracy: f64,
}

/// Trains one model and scores it on increasingly perturbed test data.
pub fn covariate_sweep(cfg: &CovariateConfig) -> Result<CovariateResult> {
    if cfg.levels.len() < 2 {
        return Err(invalid("a sweep needs at least two levels"));
    }
    let (train_set, test_set) = train_test_data(
        cfg.class_count,
        cfg.train_per_class,
        cfg.test_per_class,
        cfg.seed,
    )?;
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let model = train_default(&train_set, &tcfg, cfg.seed)?;
    let train_accuracy = evaluate(&model, &train_set.images, &train_set.labels)?.accuracy;
    let mut points = Vec::with_capacity(cfg.levels.len());
    for (i, &level) in cfg.levels.iter().enumerate() {
        let shifted = apply_shift(
            &test_set.images,
            &cfg.kind.spec(level)?,
            cfg.seed.wrapping_add(i as u64),
        )?;
        let accuracy = evaluate(&model, &shifted, &test_set.labels)?.accuracy;
        let drift = drift_on(
            &model,
            &shifted,
            &cfg.drift,
            cfg.seed,
            ("model", &format!("level{level}")),
        )?
        .aggregate;
        points.push(SweepPoint {
            level,
            accuracy,
            drift,
        });
    }
    let levels: Vec<f64> = points.iter().map(|p| p.level).collect();
    let drifts: Vec<f64> = points.iter().map(|p| p.drift).collect();
    let accs: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    Ok(CovariateResult {
        train_accuracy,
        rho_severity_drift: spearman_rank_corr(&levels, &drifts)?,
        rho_drift_accuracy: spearman_rank_corr(&drifts, &accs)?,
        points,
    })
}

#[derive(Debug, Clone)]
pub struct ConceptConfig {
    pub overlaps: Vec<f64>,
    pub class_count: usize,
    pub classes_per_split: usize,
    pub samples_per_class: usize,
    pub train: TrainConfig,
    pub drift: DriftConfig,
    pub seed: u64,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self {
            overlaps: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            class_count: 8,
            classes_per_split: 4,
            samples_per_class: 200,
            train: TrainConfig::default(),
            // Cosine saturates once shared classes dominate; KL keeps resolving.
            drift: DriftConfig {
                metric: Metric::GaussianKl,
                iterations: 32,
                ..DriftConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPoint {
    pub overlap: f64,
    pub shared_classes: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Train accuracy minus test accuracy.
    pub accuracy_gap: f64,
    pub drift: f64,
    /// Drift on the model's own training data.
    pub baseline_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptResult {
    pub points: Vec<ConceptPoint>,
    /// Drift of the same model on FakeData.
    pub fake_drift: f64,
    /// Accuracy gap regressed on drift; needs at least three levels.
    pub fit: Option<LinearFit>,
    /// Spearman correlation of drift and accuracy gap, when defined.
    pub rho_drift_gap: Option<f64>,
}

/// Trains one model per run and scores it against the test side of each
/// overlap level. Every level uses the same split seed, so the train
/// classes are fixed and raising the overlap swaps unseen test classes for
/// seen ones. The model is trained on the train side of the full-overlap
/// split, which shares no sample with any level's test side.
pub fn concept_sweep(cfg: &ConceptConfig) -> Result<ConceptResult> {
    let data = generate_dataset(cfg.class_count, cfg.samples_per_class, cfg.seed)?;
    let spec = |p: f64| OverlapSpec {
        total_classes: cfg.class_count,
        classes_per_split: cfg.classes_per_split,
        overlap_probability: p,
        seed: cfg.seed,
    };
    let train_set = overlapping_split(&data, &spec(1.0))?.train;
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let model = train_default(&train_set, &tcfg, cfg.seed)?;
    let train_accuracy = evaluate(&model, &train_set.images, &train_set.labels)?.accuracy;
    let baseline_drift = drift_on(
        &model,
        &train_set.images,
        &cfg.drift,
        cfg.seed,
        ("model", "train"),
    )?
    .aggregate;
    let fake = fake_data(train_set.images.shape(), cfg.seed);
    let fake_drift =
        drift_on(&model, &fake, &cfg.drift, cfg.seed, ("model", "fakedata"))?.aggregate;

    let mut points = Vec::with_capacity(cfg.overlaps.len());
    for &p in &cfg.overlaps {
        let split = overlapping_split(&data, &spec(p))?;
        let test_accuracy = evaluate(&model, &split.test.images, &split.test.labels)?.accuracy;
        let drift = drift_on(
            &model,
            &split.test.images,
            &cfg.drift,
            cfg.seed,
            ("model", "test"),
        )?
        .aggregate;
        points.push(ConceptPoint {
            overlap: p,
            shared_classes: split.overlapped_classes,
            train_accuracy,
            test_accuracy,
            accuracy_gap: train_accuracy - test_accuracy,
            drift,
            baseline_drift,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.drift).collect();
    let y: Vec<f64> = points.iter().map(|p| p.accuracy_gap).collect();
    Ok(ConceptResult {
        fake_drift,
        fit: if points.len() >= 3 {
            Some(linear_fit(&x, &y)?)
        } else {
            None
        },
        rho_drift_gap: spearman_rank_corr(&x, &y).ok(),
        points,
    })
}

#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    pub experts: usize,
    pub classes_per_expert: usize,
    pub cycles: usize,
    pub train_per_class: usize,
    pub cycle_per_class: usize,
    pub train: TrainConfig,
    pub drift: DriftConfig,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            experts: 5,
            classes_per_expert: 2,
            cycles: 25,
            train_per_class: 150,
            cycle_per_class: 64,
            train: TrainConfig::default(),
            drift: DriftConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryResult {
    /// Expert whose classes each cycle presents.
    pub cycle_expert: Vec<usize>,
    pub outcomes: Vec<SelectionOutcome>,
    pub summary: SelectionSummary,
}

pub fn expert_id(i: usize) -> String {
    format!("expert{i:02}")
}

/// Trains one expert per disjoint class block, then streams cycles that
/// each revisit a random expert's classes with unseen samples.
pub fn recovery_run(cfg: &RecoveryConfig) -> Result<RecoveryResult> {
    if cfg.experts == 0 || cfg.classes_per_expert == 0 {
        return Err(invalid("need at least one expert with one class"));
    }
    let class_count = cfg.experts * cfg.classes_per_expert;
    if class_count < 2 {
        return Err(invalid("need at least two classes in total"));
    }
    let per_class = cfg.train_per_class + cfg.cycle_per_class * cfg.cycles;
    let (train_pool, cycle_pool) = train_test_data(
        class_count,
        cfg.train_per_class,
        per_class - cfg.train_per_class,
        cfg.seed,
    )?;
    let block = |e: usize| -> Vec<usize> {
        (e * cfg.classes_per_expert..(e + 1) * cfg.classes_per_expert).collect()
    };

    let zoo = (0..cfg.experts)
        .map(|e| {
            let data = train_pool.with_classes(&block(e))?;
            let seed = cfg.seed.wrapping_mul(97).wrapping_add(e as u64);
            let tcfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            Ok((expert_id(e), train_default(&data, &tcfg, seed)?))
        })
        .collect::<Result<Vec<_>>>()?;

    // cycle t uses the t-th unseen slice of its expert's classes
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut cycle_expert = Vec::with_capacity(cfg.cycles);
    let mut stream = Vec::with_capacity(cfg.cycles);
    for t in 0..cfg.cycles {
        let e = rng.random_range(0..cfg.experts);
        let classes = block(e);
        let idx: Vec<usize> = (0..cycle_pool.len())
            .filter(|&i| {
                let slot = i / class_count;
                classes.contains(&cycle_pool.labels[i]) && slot / cfg.cycle_per_class == t
            })
            .collect();
        cycle_expert.push(e);
        stream.push(cycle_pool.subset(&idx)?);
    }
    let outcomes = run_concept_recovery(&zoo, &stream, &cfg.drift, cfg.seed)?;
    Ok(RecoveryResult {
        summary: summarize(&outcomes)?,
        cycle_expert,
        outcomes,
    })
}
