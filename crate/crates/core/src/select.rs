//! Label-free model selection: rank candidates by drift, pick the smallest,
//! and score the pick against true accuracies when they are known.

use std::collections::BTreeMap;

use crate::drift::{mde_score, DriftConfig};
use crate::error::{invalid, Error, Result};
use crate::metrics::spearman_rank_corr;
use crate::net::{evaluate, ToyModel};
use crate::shift::{BatchStream, SyntheticDataset};

/// `k` values reported for top-k hits.
pub const TOP_K: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub model_id: String,
    pub drift: f64,
    pub true_accuracy: Option<f64>,
}

impl CandidateScore {
    pub fn new(model_id: impl Into<String>, drift: f64, true_accuracy: Option<f64>) -> Self {
        Self {
            model_id: model_id.into(),
            drift,
            true_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    /// Model ids by ascending drift.
    pub ranking: Vec<String>,
    pub chosen: String,
    /// Whether the chosen model's accuracy is among the best `k`. Empty when
    /// accuracies are unknown.
    pub topk_hit: BTreeMap<usize, bool>,
    /// Best accuracy minus chosen accuracy, when accuracies are known.
    pub regret: Option<f64>,
    pub candidates: Vec<CandidateScore>,
}

/// Picks the candidate with the smallest drift; ties go to the smallest id.
pub fn select_model(candidates: &[CandidateScore]) -> Result<SelectionOutcome> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if candidates.iter().any(|c| !c.drift.is_finite()) {
        return Err(Error::NonFinite("candidate drift"));
    }
    let mut order: Vec<&CandidateScore> = candidates.iter().collect();
    order.sort_by(|a, b| {
        a.drift
            .total_cmp(&b.drift)
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    let chosen = order[0];

    let accuracies: Option<Vec<f64>> = candidates.iter().map(|c| c.true_accuracy).collect();
    let (mut topk_hit, mut regret) = (BTreeMap::new(), None);
    if let (Some(mut acc), Some(mine)) = (accuracies, chosen.true_accuracy) {
        if acc.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("candidate accuracy"));
        }
        acc.sort_by(|a, b| b.total_cmp(a));
        for k in TOP_K {
            let kth = acc[(k - 1).min(acc.len() - 1)];
            topk_hit.insert(k, mine >= kth);
        }
        regret = Some(acc[0] - mine);
    }
    Ok(SelectionOutcome {
        ranking: order.iter().map(|c| c.model_id.clone()).collect(),
        chosen: chosen.model_id.clone(),
        topk_hit,
        regret,
        candidates: candidates.to_vec(),
    })
}

/// Scores every zoo model on every cycle's data and selects per cycle.
/// True accuracies come from the cycle's labels.
pub fn run_concept_recovery(
    zoo: &[(String, ToyModel)],
    stream: &[SyntheticDataset],
    cfg: &DriftConfig,
    seed: u64,
) -> Result<Vec<SelectionOutcome>> {
    if zoo.is_empty() {
        return Err(Error::Empty("model zoo"));
    }
    stream
        .iter()
        .enumerate()
        .map(|(t, data)| {
            if data.is_empty() {
                return Err(invalid(format!("cycle {t} holds no samples")));
            }
            let candidates = zoo
                .iter()
                .map(|(id, model)| {
                    let batches = BatchStream::new(
                        &data.images,
                        cfg.batch_size,
                        seed.wrapping_add(t as u64),
                    )?;
                    let report = mde_score(model, batches, cfg, id, &format!("cycle{t}"))?;
                    let acc = evaluate(model, &data.images, &data.labels)?.accuracy;
                    Ok(CandidateScore::new(id.clone(), report.aggregate, Some(acc)))
                })
                .collect::<Result<Vec<_>>>()?;
            select_model(&candidates)
        })
        .collect()
}

pub const CYCLE_CSV_HEADER: [&str; 6] =
    ["cycle", "model_id", "drift", "accuracy", "rank", "chosen"];

/// One row per (cycle, model).
pub fn write_cycle_csv<W: std::io::Write>(
    outcomes: &[SelectionOutcome],
    w: &mut csv::Writer<W>,
) -> Result<()> {
    w.write_record(CYCLE_CSV_HEADER)?;
    for (t, o) in outcomes.iter().enumerate() {
        for c in &o.candidates {
            let rank = o
                .ranking
                .iter()
                .position(|id| id == &c.model_id)
                .unwrap_or(0)
                + 1;
            w.write_record([
                t.to_string(),
                c.model_id.clone(),
                c.drift.to_string(),
                c.true_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                rank.to_string(),
                (c.model_id == o.chosen).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSummary {
    pub cycles: usize,
    pub top1_rate: f64,
    pub top3_rate: f64,
    pub top5_rate: f64,
    pub mean_regret: f64,
    /// Regret of a uniformly random pick, averaged over cycles.
    pub random_regret: f64,
    /// Spearman correlation of drift and accuracy, averaged over the cycles
    /// where it is defined.
    pub drift_accuracy_rho: Option<f64>,
}

pub fn summarize(outcomes: &[SelectionOutcome]) -> Result<SelectionSummary> {
    if outcomes.is_empty() {
        return Err(Error::Empty("selection outcomes"));
    }
    let n = outcomes.len() as f64;
    let rate = |k: usize| -> Result<f64> {
        let hits = outcomes
            .iter()
            .map(|o| {
                o.topk_hit
                    .get(&k)
                    .copied()
                    .ok_or(Error::Undefined("top-k without accuracies"))
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / n)
    };
    let mut regret = 0.0;
    let mut random = 0.0;
    let mut rhos = Vec::new();
    for o in outcomes {
        regret += o
            .regret
            .ok_or(Error::Undefined("regret without accuracies"))?;
        let acc: Vec<f64> = o
            .candidates
            .iter()
            .filter_map(|c| c.true_accuracy)
            .collect();
        let best = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        random += best - acc.iter().sum::<f64>() / acc.len() as f64;
        let drift: Vec<f64> = o.candidates.iter().map(|c| c.drift).collect();
        if let Ok(r) = spearman_rank_corr(&drift, &acc) {
            rhos.push(r);
        }
    }
    Ok(SelectionSummary {
        cycles: outcomes.len(),
        top1_rate: rate(1)?,
        top3_rate: rate(3)?,
        top5_rate: rate(5)?,
        mean_regret: regret / n,
        random_regret: random / n,
        drift_accuracy_rho: (!rhos.is_empty())
            .then(|| rhos.iter().sum::<f64>() / rhos.len() as f64),
    })
}
