//! Supervised calibration baselines, rank correlation and least-squares
//! fitting of accuracy against drift.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, shape, Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-6;

pub const DEFAULT_ECE_BINS: usize = 15;

fn check_probabilities(probs: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Empty("probabilities"));
    }
    if probs.len() != labels.len() {
        return Err(shape(format!(
            "{} rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    for (i, (row, &y)) in probs.iter().zip(labels).enumerate() {
        if y >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: row.len(),
            });
        }
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid(format!("row {i} holds an invalid probability")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(invalid(format!("row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the true labels.
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_probabilities(probs, labels)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(row, &y)| -row[y].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean squared distance between each row and the one-hot label.
pub fn brier(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_probabilities(probs, labels)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(k, &p)| {
                    let t = if k == y { 1.0 } else { 0.0 };
                    (p - t).powi(2)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Expected calibration error over equal-width confidence bins. A
/// confidence of exactly 1 falls in the last bin.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    check_probabilities(probs, labels)?;
    if bins == 0 {
        return Err(invalid("ece needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut confidence = vec![0.0; bins];
    for (row, &y) in probs.iter().zip(labels) {
        let pred = crate::net::argmax(row);
        let conf = row[pred];
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        confidence[b] += conf;
        if pred == y {
            correct[b] += 1.0;
        }
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] / m - confidence[b] / m).abs()
        })
        .sum())
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman_rank_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(invalid("rank correlation needs at least two points"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank correlation input"));
    }
    pearson(&average_ranks(a), &average_ranks(b))
        .ok_or(Error::Undefined("rank correlation of constant input"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// 95% half-width of the mean prediction at each input `x`.
    pub confidence_band: Vec<f64>,
    n: usize,
    x_mean: f64,
    sxx: f64,
    residual_se: f64,
    t_quantile: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }

    /// 95% half-width of the mean prediction at an arbitrary `x`.
    pub fn band_half_width(&self, x: f64) -> f64 {
        self.t_quantile
            * self.residual_se
            * (1.0 / self.n as f64 + (x - self.x_mean).powi(2) / self.sxx).sqrt()
    }
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(shape(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(invalid("linear fit needs at least three points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear fit input"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) * nf {
        return Err(Error::Undefined("linear fit of constant x"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    };
    let residual_se = (sse / (nf - 2.0)).sqrt();
    let t_quantile = StudentsT::new(0.0, 1.0, nf - 2.0)
        .map_err(|e| invalid(e.to_string()))?
        .inverse_cdf(0.975);
    let mut fit = LinearFit {
        slope,
        intercept,
        r_squared,
        confidence_band: Vec::new(),
        n,
        x_mean: mx,
        sxx,
        residual_se,
        t_quantile,
    };
    fit.confidence_band = x.iter().map(|&v| fit.band_half_width(v)).collect();
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nll_closed_forms() {
        assert_abs_diff_eq!(
            nll(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            nll(&[vec![0.5, 0.5]], &[1]).unwrap(),
            0.693_147_180_559_945_3,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            nll(&[vec![0.25; 4]], &[2]).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );
        // a zero probability on the label is floored, not infinite
        assert_abs_diff_eq!(
            nll(&[vec![1.0, 0.0]], &[1]).unwrap(),
            -PROB_FLOOR.ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn brier_closed_forms() {
        assert_abs_diff_eq!(brier(&[vec![0.0, 1.0, 0.0]], &[1]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            brier(&[vec![0.5, 0.5]], &[0]).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            brier(&[vec![1.0, 0.0]], &[1]).unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ece_closed_forms() {
        let probs = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ];
        assert_abs_diff_eq!(ece(&probs, &[0, 1, 0, 1], 15).unwrap(), 0.0);
        assert_abs_diff_eq!(
            ece(&probs, &[0, 1, 1, 0], 15).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        let soft = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.55, 0.45]];
        let labels = [0, 0, 1];
        let acc: f64 = 1.0 / 3.0;
        let conf = (0.7 + 0.6 + 0.55) / 3.0;
        assert_abs_diff_eq!(
            ece(&soft, &labels, 1).unwrap(),
            (acc - conf).abs(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn invalid_rows_rejected() {
        assert!(nll(&[vec![0.6, 0.6]], &[0]).is_err());
        assert!(brier(&[vec![0.5, 0.5]], &[2]).is_err());
        assert!(ece(&[vec![0.5, 0.5]], &[0], 0).is_err());
        assert!(nll(&[], &[]).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert_abs_diff_eq!(
            spearman_rank_corr(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_abs_diff_eq!(
            spearman_rank_corr(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0
        );
        assert_abs_diff_eq!(
            spearman_rank_corr(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        assert!(spearman_rank_corr(&[1.0, 2.0], &[1.0]).is_err());
        assert!(matches!(
            spearman_rank_corr(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0, 3.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert_abs_diff_eq!(f.slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.intercept, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.r_squared, 1.0, epsilon = 1e-12);
        assert!(f.confidence_band.iter().all(|w| w.abs() < 1e-6));
    }

    #[test]
    fn independent_noise_has_low_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        assert!(linear_fit(&x, &y).unwrap().r_squared < 0.2);
    }

    #[test]
    fn band_is_narrowest_at_mean() {
        let x = [0.0, 1.0, 2.0, 4.0, 7.0];
        let y = [0.3, 1.1, 1.8, 4.4, 6.5];
        let f = linear_fit(&x, &y).unwrap();
        let centre = f.band_half_width(f.x_mean);
        for dx in [-3.0, -0.5, 0.01, 2.0] {
            assert!(f.band_half_width(f.x_mean + dx) > centre);
        }
        // n = 5: t(0.975, 3 dof)
        assert_abs_diff_eq!(f.t_quantile, 3.182_446_305_284_263, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_fit_rejected() {
        assert!(linear_fit(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(linear_fit(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn spearman_monotone_invariance(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..30)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(rho) = spearman_rank_corr(&a, &b) {
                prop_assert!((-1.0..=1.0).contains(&rho));
                let a2: Vec<f64> = a.iter().map(|x| x.powi(3) + 5.0).collect();
                let b2: Vec<f64> = b.iter().map(|x| (x / 100.0).exp()).collect();
                let rho2 = spearman_rank_corr(&a2, &b2).unwrap();
                prop_assert!((rho - rho2).abs() < 1e-9);
            }
        }

        #[test]
        fn calibration_metrics_are_bounded(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..20), seed in 0u64..100) {
            let probs: Vec<Vec<f64>> = rows.iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            }).collect();
            let labels: Vec<usize> = (0..probs.len()).map(|i| (i + seed as usize) % 3).collect();
            prop_assert!(nll(&probs, &labels).unwrap() >= 0.0);
            let b = brier(&probs, &labels).unwrap();
            prop_assert!((0.0..=2.0).contains(&b));
            prop_assert!(ece(&probs, &labels, 15).unwrap() >= 0.0);
        }
    }
}
