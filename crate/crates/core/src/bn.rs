//! Batch-normalization state, the inference-mode transform, per-channel
//! batch statistics and the exponential-moving-average update of the
//! running estimates.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::Tensor4;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_RETAIN_ALPHA: f64 = 0.9;

/// Smallest magnitude a scale parameter is divided by.
pub const GAMMA_FLOOR: f64 = 1e-6;

/// Lower bound on any standard deviation used as a divisor; only reachable
/// when both the variance and `eps` are zero.
pub(crate) const STD_FLOOR: f64 = 1e-12;

/// Learnable affine parameters plus running estimates of one BN layer.
///
/// `running_var` holds the variance; the standard deviation is derived as
/// `sqrt(running_var + eps)` wherever it is needed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight kept on the old running value at each update.
    pub retain_alpha: f64,
    pub eps: f64,
}

impl BnLayerState {
    pub fn new(
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        retain_alpha: f64,
        eps: f64,
    ) -> Result<Self> {
        let s = Self {
            gamma,
            beta,
            running_mean,
            running_var,
            retain_alpha,
            eps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Fresh layer: unit scale, zero shift, zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            retain_alpha: DEFAULT_RETAIN_ALPHA,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(shape(format!(
                "bn vectors disagree on channel count: gamma {}, beta {}, mean {}, var {}",
                c,
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        let all = self
            .gamma
            .iter()
            .chain(&self.beta)
            .chain(&self.running_mean)
            .chain(&self.running_var);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bn state"));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(invalid("running variance must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.retain_alpha) {
            return Err(invalid(format!(
                "retain alpha must lie in [0, 1], got {}",
                self.retain_alpha
            )));
        }
        // eps = 0 is accepted so exact zero-drift fixtures can be expressed.
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(invalid(format!(
                "eps must be non-negative, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// `sqrt(running_var[c] + eps)`, floored away from zero.
    pub fn running_std(&self, c: usize) -> f64 {
        safe_std(self.running_var[c], self.eps)
    }

    fn check_channels(&self, got: usize) -> Result<()> {
        if got != self.channels() {
            return Err(shape(format!(
                "input has {got} channels, bn layer expects {}",
                self.channels()
            )));
        }
        Ok(())
    }
}

pub(crate) fn safe_std(var: f64, eps: f64) -> f64 {
    (var + eps).sqrt().max(STD_FLOOR)
}

/// Sign-preserving clamp of `gamma` away from zero.
pub fn gamma_safe(gamma: f64) -> f64 {
    let mag = gamma.abs().max(GAMMA_FLOOR);
    if gamma < 0.0 {
        -mag
    } else {
        mag
    }
}

/// Per-channel mean and biased (population) variance of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Accumulates per-channel moments over any number of tensors.
#[derive(Debug, Clone)]
pub(crate) struct MomentAccumulator {
    count: Vec<usize>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub(crate) fn new(channels: usize) -> Self {
        Self {
            count: vec![0; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    /// Merges one channel's values (Chan et al. parallel update).
    pub(crate) fn push_plane(&mut self, c: usize, values: &[f64]) {
        if values.is_empty() {
            return;
        }
        let n_b = values.len() as f64;
        let mean_b = values.iter().sum::<f64>() / n_b;
        let m2_b: f64 = values.iter().map(|v| (v - mean_b) * (v - mean_b)).sum();
        let n_a = self.count[c] as f64;
        let n = n_a + n_b;
        let delta = mean_b - self.mean[c];
        self.mean[c] += delta * n_b / n;
        self.m2[c] += m2_b + delta * delta * n_a * n_b / n;
        self.count[c] += values.len();
    }

    pub(crate) fn push_tensor(&mut self, x: &Tensor4) {
        for b in 0..x.batch() {
            for c in 0..x.channels() {
                self.push_plane(c, x.channel_plane(b, c));
            }
        }
    }

    pub(crate) fn finish(self) -> Result<BatchStats> {
        if self.count.contains(&0) {
            return Err(Error::Empty("batch statistics"));
        }
        let var = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(m2, &n)| (m2 / n as f64).max(0.0))
            .collect();
        Ok(BatchStats {
            mean: self.mean,
            var,
        })
    }
}

/// Mean and biased variance of each channel over all `B*H*W` elements.
pub fn batch_stats(x: &Tensor4) -> Result<BatchStats> {
    if x.batch() * x.plane() == 0 || x.channels() == 0 {
        return Err(Error::Empty("tensor"));
    }
    let mut acc = MomentAccumulator::new(x.channels());
    acc.push_tensor(x);
    acc.finish()
}

/// Inference-mode transform `gamma * (x - mu) / sqrt(var + eps) + beta`.
pub fn bn_forward(x: &Tensor4, s: &BnLayerState) -> Result<Tensor4> {
    s.check_channels(x.channels())?;
    let mut y = x.clone();
    for c in 0..s.channels() {
        let scale = s.gamma[c] / s.running_std(c);
        let mu = s.running_mean[c];
        let beta = s.beta[c];
        for b in 0..x.batch() {
            for v in y.channel_plane_mut(b, c) {
                *v = scale * (*v - mu) + beta;
            }
        }
    }
    Ok(y)
}

/// Moves the running estimates toward the batch statistics; returns the new state.
pub fn ema_update(s: &BnLayerState, b: &BatchStats) -> Result<BnLayerState> {
    s.check_channels(b.channels())?;
    if b.var.len() != b.mean.len() {
        return Err(shape("batch stats mean/var length mismatch"));
    }
    let a = s.retain_alpha;
    let mut next = s.clone();
    for c in 0..s.channels() {
        next.running_mean[c] = a * s.running_mean[c] + (1.0 - a) * b.mean[c];
        next.running_var[c] = (a * s.running_var[c] + (1.0 - a) * b.var[c]).max(0.0);
    }
    Ok(next)
}

/// Undoes the affine part of a BN output: `(y - beta) / gamma_safe`.
pub fn source_normalize(y: &Tensor4, s: &BnLayerState) -> Result<Tensor4> {
    s.check_channels(y.channels())?;
    let mut out = y.clone();
    for c in 0..s.channels() {
        let g = gamma_safe(s.gamma[c]);
        let beta = s.beta[c];
        for b in 0..y.batch() {
            for v in out.channel_plane_mut(b, c) {
                *v = (*v - beta) / g;
            }
        }
    }
    Ok(out)
}

/// Standardizes each channel by the given batch statistics.
pub fn target_normalize(x: &Tensor4, b: &BatchStats, eps: f64) -> Result<Tensor4> {
    if b.channels() != x.channels() {
        return Err(shape(format!(
            "input has {} channels, stats have {}",
            x.channels(),
            b.channels()
        )));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid(format!("eps must be non-negative, got {eps}")));
    }
    let mut out = x.clone();
    for c in 0..x.channels() {
        let mu = b.mean[c];
        let sd = safe_std(b.var[c], eps);
        for n in 0..x.batch() {
            for v in out.channel_plane_mut(n, c) {
                *v = (*v - mu) / sd;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_channel(values: &[f64]) -> Tensor4 {
        Tensor4::new([values.len(), 1, 1, 1], values.to_vec()).unwrap()
    }

    fn state(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> BnLayerState {
        BnLayerState::new(vec![gamma], vec![beta], vec![mean], vec![var], 0.9, eps).unwrap()
    }

    #[test]
    fn stats_of_constant_tensor() {
        let s = batch_stats(&Tensor4::filled([3, 2, 2, 2], 3.0)).unwrap();
        assert_eq!(s.mean, vec![3.0, 3.0]);
        assert_eq!(s.var, vec![0.0, 0.0]);
    }

    #[test]
    fn stats_hand_values() {
        let s = batch_stats(&one_channel(&[0.0, 2.0])).unwrap();
        assert_eq!((s.mean[0], s.var[0]), (1.0, 1.0));
        let x = Tensor4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = batch_stats(&x).unwrap();
        assert!((s.mean[0] - 2.5).abs() < 1e-15);
        assert!((s.var[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn stats_of_empty_tensor() {
        assert!(matches!(
            batch_stats(&Tensor4::zeros([0, 2, 1, 1])),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn forward_identity_parameters() {
        let x = one_channel(&[-1.5, 0.0, 2.25]);
        let y = bn_forward(&x, &state(1.0, 0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn forward_substitution() {
        let y = bn_forward(&one_channel(&[2.0]), &state(3.0, 0.5, 1.0, 1.0, 0.0)).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn forward_zero_gamma_is_constant() {
        let y = bn_forward(
            &one_channel(&[-4.0, 1.0, 9.0]),
            &state(0.0, 0.7, 0.3, 2.0, 1e-5),
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn forward_channel_mismatch() {
        let x = Tensor4::zeros([1, 2, 1, 1]);
        assert!(matches!(
            bn_forward(&x, &BnLayerState::identity(3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ema_extremes_and_substitution() {
        let b = BatchStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let mut s = state(1.0, 0.0, 0.0, 1.0, 1e-5);
        s.retain_alpha = 0.0;
        let next = ema_update(&s, &b).unwrap();
        assert_eq!((next.running_mean[0], next.running_var[0]), (1.0, 4.0));

        s.retain_alpha = 1.0;
        let next = ema_update(&s, &b).unwrap();
        assert_eq!((next.running_mean[0], next.running_var[0]), (0.0, 1.0));

        s.retain_alpha = 0.9;
        let next = ema_update(&s, &b).unwrap();
        assert!((next.running_mean[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ema_channel_mismatch() {
        let b = BatchStats {
            mean: vec![0.0; 2],
            var: vec![1.0; 2],
        };
        assert!(ema_update(&BnLayerState::identity(3), &b).is_err());
    }

    #[test]
    fn source_normalize_cases() {
        let out = source_normalize(&one_channel(&[4.0]), &state(2.0, 0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(out.data(), &[2.0]);

        let out =
            source_normalize(&one_channel(&[1.0]), &state(1e-12, 0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(out.data(), &[1e6]);

        let out =
            source_normalize(&one_channel(&[1.0]), &state(-1e-12, 0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(out.data(), &[-1e6]);
    }

    #[test]
    fn zero_drift_sides_coincide() {
        // running stats equal to the batch stats: both sides of the drift
        // comparison produce the same standardized tensor
        let x = Tensor4::new([2, 2, 1, 2], vec![0.5, 1.5, -2.0, 4.0, 2.5, 3.5, 0.0, 6.0]).unwrap();
        let stats = batch_stats(&x).unwrap();
        let s = BnLayerState::new(
            vec![1.7, -0.4],
            vec![0.2, 3.0],
            stats.mean.clone(),
            stats.var.clone(),
            0.9,
            1e-5,
        )
        .unwrap();
        let lhs = target_normalize(&x, &stats, s.eps).unwrap();
        let rhs = source_normalize(&bn_forward(&x, &s).unwrap(), &s).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn target_normalize_cases() {
        let x = Tensor4::filled([2, 1, 2, 2], 5.0);
        let out = target_normalize(&x, &batch_stats(&x).unwrap(), 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let x = one_channel(&[0.0, 2.0]);
        let out = target_normalize(&x, &batch_stats(&x).unwrap(), 0.0).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn state_validation() {
        assert!(BnLayerState::new(vec![1.0], vec![0.0], vec![0.0], vec![-1.0], 0.9, 1e-5).is_err());
        assert!(
            BnLayerState::new(vec![1.0], vec![0.0; 2], vec![0.0], vec![1.0], 0.9, 1e-5).is_err()
        );
        assert!(BnLayerState::new(vec![1.0], vec![0.0], vec![0.0], vec![1.0], 1.5, 1e-5).is_err());
        assert!(BnLayerState::new(vec![1.0], vec![0.0], vec![0.0], vec![1.0], 0.9, -1.0).is_err());
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor4> {
        (1usize..5, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(b, c, h, w)| {
            prop::collection::vec(-10.0f64..10.0, b * c * h * w)
                .prop_map(move |d| Tensor4::new([b, c, h, w], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn target_normalize_standardizes(x in tensor_strategy()) {
            let eps = 1e-5;
            let stats = batch_stats(&x).unwrap();
            let out = batch_stats(&target_normalize(&x, &stats, eps).unwrap()).unwrap();
            for c in 0..x.channels() {
                prop_assert!(out.mean[c].abs() <= 1e-9);
                // var_out = var / (var + eps)
                let expected = stats.var[c] / (stats.var[c] + eps);
                prop_assert!((out.var[c] - expected).abs() <= 1e-9);
                prop_assert!(out.var[c] <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn forward_then_source_normalize_standardizes(
            x in tensor_strategy(),
            gamma in prop_oneof![-5.0f64..-1e-3, 1e-3f64..5.0],
            beta in -3.0f64..3.0,
            mean in -2.0f64..2.0,
            var in 0.01f64..4.0,
        ) {
            let c = x.channels();
            let s = BnLayerState::new(vec![gamma; c], vec![beta; c], vec![mean; c], vec![var; c], 0.9, 1e-5).unwrap();
            let back = source_normalize(&bn_forward(&x, &s).unwrap(), &s).unwrap();
            let sd = (var + 1e-5f64).sqrt();
            for (o, v) in back.data().iter().zip(x.data()) {
                prop_assert!((o - (v - mean) / sd).abs() <= 1e-9);
            }
        }

        #[test]
        fn batch_stats_permutation_invariant(x in tensor_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let [b, c, h, w] = x.shape();
            let mut shuffled = x.clone();
            for ch in 0..c {
                let mut pool: Vec<f64> = (0..b).flat_map(|n| x.channel_plane(n, ch).to_vec()).collect();
                pool.shuffle(&mut rng);
                for n in 0..b {
                    shuffled.channel_plane_mut(n, ch).copy_from_slice(&pool[n * h * w..(n + 1) * h * w]);
                }
            }
            let a = batch_stats(&x).unwrap();
            let s = batch_stats(&shuffled).unwrap();
            for ch in 0..c {
                prop_assert!((a.mean[ch] - s.mean[ch]).abs() <= 1e-12);
                prop_assert!((a.var[ch] - s.var[ch]).abs() <= 1e-10);
            }
        }
    }
}
