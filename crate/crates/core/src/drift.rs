//! Model drift scoring from batch-normalization statistics.
//!
//! For every BN layer the input batch is standardized twice: once by its
//! own batch statistics (the target view) and once by the layer's running
//! estimates, recovered from the BN output by undoing the affine part (the
//! source view). The per-layer drift averages a distance between the two
//! views over every `(sample, channel)` pair; the model drift is the
//! weighted mean over layers.
//!
//! Three distances are supported. `Cosine` compares the per-sample spatial
//! vectors directly. `Wasserstein` and `GaussianKl` use the closed forms
//! obtained when the source view is treated as a Gaussian with mean
//! `(mu_bar - mu) / sigma` and variance `(sigma_bar / sigma)^2` against the
//! standard normal target view; they need batch statistics only.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bn::{
    batch_stats, bn_forward, safe_std, source_normalize, target_normalize, BatchStats,
    BnLayerState, DEFAULT_EPS,
};
use crate::error::{invalid, shape, Error, Result};
use crate::svd::truncate_reconstruct;
use crate::tensor::{reshape_channels, Tensor4};

/// Norm below which a vector has no usable direction.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Truncation ratio used when refinement is requested without a value.
pub const DEFAULT_TRUNCATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Cosine,
    Wasserstein,
    GaussianKl,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Wasserstein => "wasserstein",
            Metric::GaussianKl => "kl",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Ok(Metric::Cosine),
            "wasserstein" | "w2" => Ok(Metric::Wasserstein),
            "kl" | "gaussian-kl" | "gaussiankl" => Ok(Metric::GaussianKl),
            other => Err(invalid(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub metric: Metric,
    /// Fraction of singular values kept when refining BN inputs; `None`
    /// disables refinement.
    pub truncation_ratio: Option<f64>,
    pub batch_size: usize,
    pub iterations: usize,
    /// Per-layer weights in `[0, 1]`; `None` weights every layer by 1.
    pub layer_weights: Option<Vec<f64>>,
    /// Guard added to the batch variance in the target view.
    pub eps: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            truncation_ratio: None,
            batch_size: 64,
            iterations: 8,
            layer_weights: None,
            eps: DEFAULT_EPS,
        }
    }
}

impl DriftConfig {
    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_truncation(mut self, ratio: Option<f64>) -> Self {
        self.truncation_ratio = ratio;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.truncation_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(invalid(format!(
                    "truncation ratio must lie in (0, 1], got {r}"
                )));
            }
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if self.iterations < 1 {
            return Err(invalid("iterations must be at least 1"));
        }
        if let Some(w) = &self.layer_weights {
            if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid("layer weights must lie in [0, 1]"));
            }
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(invalid(format!(
                "eps must be non-negative, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    fn weights(&self, layers: usize) -> Result<Vec<f64>> {
        match &self.layer_weights {
            None => Ok(vec![1.0; layers]),
            Some(w) if w.len() == layers => Ok(w.clone()),
            Some(w) => Err(shape(format!(
                "{} layer weights for {layers} bn layers",
                w.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub per_layer: Vec<f64>,
    pub aggregate: f64,
    pub config: DriftConfig,
    pub model_id: String,
    pub dataset_id: String,
    /// `(sample, channel)` pairs left out because a vector had no direction.
    pub channels_skipped: usize,
}

impl DriftReport {
    pub const CSV_HEADER: [&'static str; 7] = [
        "model_id",
        "dataset_id",
        "metric",
        "truncation",
        "layer",
        "drift",
        "channels_skipped",
    ];

    /// One row per layer followed by an `aggregate` row.
    pub fn csv_rows(&self) -> Vec<[String; 7]> {
        let trunc = self
            .config
            .truncation_ratio
            .map_or_else(|| "none".to_string(), |r| r.to_string());
        let row = |layer: String, value: f64| {
            [
                self.model_id.clone(),
                self.dataset_id.clone(),
                self.config.metric.to_string(),
                trunc.clone(),
                layer,
                value.to_string(),
                self.channels_skipped.to_string(),
            ]
        };
        let mut rows: Vec<_> = self
            .per_layer
            .iter()
            .enumerate()
            .map(|(l, &d)| row(l.to_string(), d))
            .collect();
        rows.push(row("aggregate".into(), self.aggregate));
        rows
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for row in self.csv_rows() {
            w.write_record(&row)?;
        }
        Ok(())
    }
}

/// `(1 - cos(a, b)) / 2`, or `None` when either vector is (near) zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(shape(format!(
            "cosine distance of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("vector"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return Ok(None);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(Some((1.0 - cos) / 2.0))
}

/// Running sum of distance terms for one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LayerTerms {
    pub sum: f64,
    pub count: usize,
    pub skipped: usize,
}

impl LayerTerms {
    pub fn merge(self, other: LayerTerms) -> LayerTerms {
        LayerTerms {
            sum: self.sum + other.sum,
            count: self.count + other.count,
            skipped: self.skipped + other.skipped,
        }
    }

    /// Mean term; zero when every term was skipped.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Replaces every sample by its rank-truncated `C x (H*W)` reconstruction.
pub fn refine_low_rank(x: &Tensor4, r_tr: f64) -> Result<Tensor4> {
    let mut out = x.clone();
    for b in 0..x.batch() {
        let m = reshape_channels(x, b)?;
        out.set_sample_from_matrix(b, &truncate_reconstruct(&m, r_tr)?)?;
    }
    Ok(out)
}

fn check_layer_input(x: &Tensor4, s: &BnLayerState) -> Result<()> {
    if x.channels() != s.channels() {
        return Err(shape(format!(
            "bn input has {} channels, layer expects {}",
            x.channels(),
            s.channels()
        )));
    }
    if x.batch() == 0 || x.plane() == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(())
}

/// Distance terms of one batch at one layer, before averaging.
pub fn layer_terms(x: &Tensor4, s: &BnLayerState, cfg: &DriftConfig) -> Result<LayerTerms> {
    check_layer_input(x, s)?;
    let refined = match cfg.truncation_ratio {
        Some(r) => Some(refine_low_rank(x, r)?),
        None => None,
    };
    let target_input = refined.as_ref().unwrap_or(x);
    let stats = batch_stats(target_input)?;

    match cfg.metric {
        Metric::Cosine => {
            let target = target_normalize(target_input, &stats, cfg.eps)?;
            // the source view always comes from the raw input through the BN transform
            let source = source_normalize(&bn_forward(x, s)?, s)?;
            let mut terms = LayerTerms::default();
            for n in 0..x.batch() {
                for c in 0..x.channels() {
                    match cosine_distance(target.channel_plane(n, c), source.channel_plane(n, c))? {
                        Some(d) => {
                            terms.sum += d;
                            terms.count += 1;
                        }
                        None => terms.skipped += 1,
                    }
                }
            }
            Ok(terms)
        }
        Metric::Wasserstein => stats_terms(std::slice::from_ref(&stats), s, wasserstein_term),
        Metric::GaussianKl => stats_terms(std::slice::from_ref(&stats), s, kl_term),
    }
}

/// Drift of one BN layer for one batch of its (pre-normalization) inputs.
pub fn layer_drift(x: &Tensor4, s: &BnLayerState, cfg: &DriftConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(layer_terms(x, s, cfg)?.mean())
}

fn wasserstein_term(mean: f64, var: f64, s: &BnLayerState, c: usize) -> f64 {
    let sigma = s.running_std(c);
    let sigma_bar = safe_std(var, s.eps);
    let dm = mean - s.running_mean[c];
    let ds = sigma_bar - sigma;
    (dm * dm + ds * ds) / (sigma * sigma)
}

fn kl_term(mean: f64, var: f64, s: &BnLayerState, c: usize) -> f64 {
    let sigma = s.running_std(c);
    let m = (mean - s.running_mean[c]) / sigma;
    let v = (safe_std(var, s.eps) / sigma).powi(2);
    // exact cancellation at v = 1, m = 0 can leave a -0.0 or a tiny negative
    ((v + m * m - 1.0 - v.ln()) / 2.0).max(0.0)
}

fn stats_terms(
    batches: &[BatchStats],
    s: &BnLayerState,
    term: fn(f64, f64, &BnLayerState, usize) -> f64,
) -> Result<LayerTerms> {
    let mut terms = LayerTerms::default();
    for b in batches {
        if b.channels() != s.channels() || b.var.len() != b.mean.len() {
            return Err(shape(format!(
                "batch stats have {} channels, layer expects {}",
                b.channels(),
                s.channels()
            )));
        }
        for c in 0..s.channels() {
            terms.sum += term(b.mean[c], b.var[c], s, c);
            terms.count += 1;
        }
    }
    Ok(terms)
}

/// Closed-form Gaussian (2-Wasserstein, squared and scaled) drift over a
/// list of batch statistics, averaged over batches and channels.
pub fn wasserstein_layer_drift(batches: &[BatchStats], s: &BnLayerState) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("batch statistics list"));
    }
    Ok(stats_terms(batches, s, wasserstein_term)?.mean())
}

/// Closed-form KL divergence between the source-view Gaussian and the
/// standard normal, averaged over batches and channels.
pub fn gaussian_kl_drift(batches: &[BatchStats], s: &BnLayerState) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("batch statistics list"));
    }
    Ok(stats_terms(batches, s, kl_term)?.mean())
}

/// `(1/L) * sum(w_l * d_l)`.
pub fn aggregate(per_layer: &[f64], weights: &[f64]) -> Result<f64> {
    if per_layer.len() != weights.len() {
        return Err(shape(format!(
            "{} layer drifts with {} weights",
            per_layer.len(),
            weights.len()
        )));
    }
    if per_layer.is_empty() {
        return Err(Error::Empty("layer list"));
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(invalid("layer weights must lie in [0, 1]"));
    }
    let total: f64 = per_layer.iter().zip(weights).map(|(d, w)| d * w).sum();
    Ok(total / per_layer.len() as f64)
}

/// Anything that exposes BN layers and can capture their inputs.
pub trait BnProbe {
    fn bn_states(&self) -> &[BnLayerState];

    /// Pre-normalization inputs of every BN layer for one batch, in layer order.
    fn trace_bn_inputs(&self, x: &Tensor4) -> Result<Vec<Tensor4>>;
}

/// Scores already-captured BN inputs: `batches[t][l]` is the input of layer
/// `l` for batch `t`. Terms are pooled across batches per layer.
pub fn score_activations(
    states: &[BnLayerState],
    batches: &[Vec<Tensor4>],
    cfg: &DriftConfig,
    model_id: &str,
    dataset_id: &str,
) -> Result<DriftReport> {
    cfg.validate()?;
    if states.is_empty() {
        return Err(Error::NoBnLayers);
    }
    if batches.is_empty() {
        return Err(Error::Empty("activation batches"));
    }
    for (t, layers) in batches.iter().enumerate() {
        if layers.len() != states.len() {
            return Err(shape(format!(
                "batch {t} carries {} layer inputs for {} bn layers",
                layers.len(),
                states.len()
            )));
        }
    }
    let weights = cfg.weights(states.len())?;

    let terms: Vec<LayerTerms> = (0..states.len())
        .into_par_iter()
        .map(|l| {
            batches
                .iter()
                .try_fold(LayerTerms::default(), |acc, layers| {
                    Ok(acc.merge(layer_terms(&layers[l], &states[l], cfg)?))
                })
        })
        .collect::<Result<_>>()?;

    let per_layer: Vec<f64> = terms.iter().map(LayerTerms::mean).collect();
    let aggregate = aggregate(&per_layer, &weights)?;
    Ok(DriftReport {
        per_layer,
        aggregate,
        config: cfg.clone(),
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        channels_skipped: terms.iter().map(|t| t.skipped).sum(),
    })
}

/// Scores precomputed batch statistics; only the stats-based metrics apply.
/// `batches[t][l]` holds the statistics of layer `l` for batch `t`.
pub fn score_stats(
    states: &[BnLayerState],
    batches: &[Vec<BatchStats>],
    cfg: &DriftConfig,
    model_id: &str,
    dataset_id: &str,
) -> Result<DriftReport> {
    cfg.validate()?;
    if states.is_empty() {
        return Err(Error::NoBnLayers);
    }
    if batches.is_empty() {
        return Err(Error::Empty("batch statistics"));
    }
    let term = match cfg.metric {
        Metric::Wasserstein => wasserstein_term,
        Metric::GaussianKl => kl_term,
        Metric::Cosine => {
            return Err(invalid(
                "cosine drift needs full activations, not statistics",
            ))
        }
    };
    if cfg.truncation_ratio.is_some() {
        return Err(invalid("low-rank refinement needs full activations"));
    }
    let weights = cfg.weights(states.len())?;
    let mut per_layer = Vec::with_capacity(states.len());
    for (l, s) in states.iter().enumerate() {
        let layer: Vec<BatchStats> = batches
            .iter()
            .map(|b| {
                b.get(l)
                    .cloned()
                    .ok_or_else(|| shape(format!("missing statistics for layer {l}")))
            })
            .collect::<Result<_>>()?;
        per_layer.push(stats_terms(&layer, s, term)?.mean());
    }
    let aggregate = aggregate(&per_layer, &weights)?;
    Ok(DriftReport {
        per_layer,
        aggregate,
        config: cfg.clone(),
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        channels_skipped: 0,
    })
}

/// Runs `cfg.iterations` batches from `stream` through the model, captures
/// every BN input and scores them.
pub fn mde_score<P, I>(
    model: &P,
    stream: I,
    cfg: &DriftConfig,
    model_id: &str,
    dataset_id: &str,
) -> Result<DriftReport>
where
    P: BnProbe + ?Sized,
    I: IntoIterator<Item = Tensor4>,
{
    cfg.validate()?;
    if model.bn_states().is_empty() {
        return Err(Error::NoBnLayers);
    }
    let mut captured = Vec::with_capacity(cfg.iterations);
    let mut stream = stream.into_iter();
    for t in 0..cfg.iterations {
        let batch = stream.next().ok_or(Error::StreamExhausted {
            got: t,
            wanted: cfg.iterations,
        })?;
        captured.push(model.trace_bn_inputs(&batch)?);
    }
    score_activations(model.bn_states(), &captured, cfg, model_id, dataset_id)
}

/// Ratio of a drift score to the same model's FakeData drift.
pub fn normalize_by_fakedata(report: &DriftReport, fake: &DriftReport) -> Result<f64> {
    if report.config != fake.config {
        return Err(invalid(
            "reports were computed with different configurations",
        ));
    }
    if report.model_id != fake.model_id {
        return Err(invalid(format!(
            "reports belong to different models ({} vs {})",
            report.model_id, fake.model_id
        )));
    }
    if !(fake.aggregate > 0.0) {
        return Err(Error::Undefined("FakeData drift is zero"));
    }
    Ok(report.aggregate / fake.aggregate)
}

/// Standard-normal images with the given shape.
pub fn fake_data(shape: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor4::from_raw(shape, data)
}
