//! Independent oracles shared by the integration suites and the acceptance
//! report. Nothing here calls into the drift or SVD code under test.

#![allow(dead_code)]

use mde_core::bn::{BatchStats, BnLayerState};
use mde_core::drift::Metric;
use mde_core::mdet::{MdetEntry, MdetRecord, Metadata, RecordKind, Role};
use mde_core::tensor::{Matrix, Tensor4};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(mu, sigma, batch_mean, batch_sigma, wasserstein, kl)` with eps = 0.
/// Expected values were evaluated with 40-digit arithmetic from the closed
/// forms `((m' - m)^2 + (s' - s)^2) / s^2` and `(v + d^2 - 1 - ln v) / 2`
/// where `d = (m' - m) / s`, `v = (s' / s)^2`.
#[allow(clippy::excessive_precision)]
pub const CLOSED_FORM_CASES: [(f64, f64, f64, f64, f64, f64); 24] = [
    (0.0, 1.0, 1.0, 2.0, 2.0, 1.3068528194400546906),
    (2.0, 2.0, 3.0, 1.0, 0.5, 0.44314718055994530942),
    (0.0, 1.0, 0.0, 1.0, 0.0, 0.0),
    (1.0, 0.5, 1.0, 0.5, 0.0, 0.0),
    (0.0, 1.0, 1.0, 1.0, 1.0, 0.5),
    (0.0, 1.0, 0.0, 2.0, 1.0, 0.80685281944005469058),
    (-1.0, 0.25, 1.0, 0.5, 65.0, 32.806852819440054691),
    (3.0, 4.0, 3.0, 2.0, 0.25, 0.31814718055994530942),
    (0.5, 1.0, -0.5, 3.0, 5.0, 3.4013877113318903086),
    (
        10.0,
        0.1,
        10.1,
        0.1,
        0.99999999999999278355,
        0.49999999999999639178,
    ),
    (-2.0, 1.5, -2.0, 0.75, 0.25, 0.31814718055994530942),
    (0.0, 2.0, 4.0, 2.0, 4.0, 2.0),
    (1.0, 1.0, 1.0, 0.125, 0.765625, 1.5872540416798359283),
    (0.0, 0.5, 0.25, 0.5, 0.25, 0.125),
    (5.0, 3.0, 2.0, 6.0, 2.0, 1.3068528194400546906),
    (-0.75, 0.5, 0.75, 1.0, 10.0, 5.3068528194400546906),
    (0.0, 1.0, -3.0, 0.5, 9.25, 4.8181471805599453094),
    (1.5, 2.5, 0.0, 1.25, 0.61, 0.49814718055994530942),
    (7.0, 1.0, 7.0, 4.0, 9.0, 6.1137056388801093812),
    (0.0, 8.0, 1.0, 8.0, 0.015625, 0.0078125),
    (-4.0, 0.25, -4.5, 0.5, 5.0, 2.8068528194400546906),
    (2.0, 1.0, 2.5, 1.5, 0.5, 0.34453489189183561802),
    (
        0.0,
        1.0,
        0.001,
        1.001,
        1.9999999999997797734e-6,
        1.4996669164666130532e-6,
    ),
    (100.0, 10.0, 90.0, 20.0, 2.0, 1.3068528194400546906),
];

/// Single-channel state and stats for one closed-form case.
pub fn closed_form_inputs(case: (f64, f64, f64, f64, f64, f64)) -> (BnLayerState, BatchStats) {
    let (mu, sigma, mb, sb, _, _) = case;
    let state = BnLayerState::new(
        vec![1.0],
        vec![0.0],
        vec![mu],
        vec![sigma * sigma],
        0.9,
        0.0,
    )
    .unwrap();
    let stats = BatchStats {
        mean: vec![mb],
        var: vec![sb * sb],
    };
    (state, stats)
}

pub fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    let n: usize = shape.iter().product();
    let shift: f64 = rng.random_range(-1.0..1.0);
    let scale: f64 = rng.random_range(0.3..2.0);
    Tensor4::new(
        shape,
        (0..n)
            .map(|_| shift + scale * rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

pub fn random_state(channels: usize, eps: f64, rng: &mut ChaCha8Rng) -> BnLayerState {
    let mut v = |lo: f64, hi: f64| {
        (0..channels)
            .map(|_| rng.random_range(lo..hi))
            .collect::<Vec<f64>>()
    };
    let magnitude = v(0.5, 2.0);
    let signs = v(-1.0, 1.0);
    let gamma = magnitude
        .iter()
        .zip(&signs)
        .map(|(m, s)| if *s < 0.0 { -m } else { *m })
        .collect();
    BnLayerState::new(gamma, v(-1.0, 1.0), v(-1.0, 1.0), v(0.2, 3.0), 0.9, eps).unwrap()
}

/// A seeded case within `B <= 8, C <= 16, H = W <= 8`.
pub fn random_case(seed: u64) -> (Tensor4, BnLayerState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=8);
    let c = rng.random_range(1..=16);
    let hw = rng.random_range(1..=8);
    let x = random_tensor([b, c, hw, hw], &mut rng);
    let state = random_state(c, 1e-5, &mut rng);
    (x, state)
}

fn at(x: &[f64], shape: [usize; 4], n: usize, c: usize, p: usize) -> f64 {
    x[(n * shape[1] + c) * shape[2] * shape[3] + p]
}

/// Best rank-`ceil(r * min(C, HW))` approximation of every sample's
/// `C x HW` matrix, computed with nalgebra.
pub fn oracle_truncate(x: &Tensor4, r: f64) -> Vec<f64> {
    let shape = x.shape();
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        let m = DMatrix::from_fn(c, hw, |i, j| at(x.data(), shape, n, i, j));
        let approx = nalgebra_truncate(&m, r);
        for i in 0..c {
            for j in 0..hw {
                out[(n * c + i) * hw + j] = approx[(i, j)];
            }
        }
    }
    out
}

pub fn nalgebra_truncate(m: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    let full = m.nrows().min(m.ncols());
    let k = ((r * full as f64).ceil() as usize).clamp(1, full);
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..full).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for &i in &order[..k] {
        out += svd.singular_values[i] * u.column(i) * vt.row(i);
    }
    out
}

/// Descending singular values from nalgebra.
pub fn nalgebra_singular_values(m: &Matrix) -> Vec<f64> {
    let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let mut s: Vec<f64> = d.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn floor_std(var: f64, eps: f64) -> f64 {
    (var + eps).sqrt().max(1e-12)
}

/// Two-pass per-channel mean and biased variance.
fn channel_stats(x: &[f64], shape: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = shape;
    let count = (b * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for k in 0..c {
        let mut s = 0.0;
        for n in 0..b {
            for p in 0..h * w {
                s += at(x, shape, n, k, p);
            }
        }
        mean[k] = s / count;
        let mut q = 0.0;
        for n in 0..b {
            for p in 0..h * w {
                let d = at(x, shape, n, k, p) - mean[k];
                q += d * d;
            }
        }
        var[k] = q / count;
    }
    (mean, var)
}

/// Scalar-loop drift of one layer for one batch. `eps` guards the target
/// view's batch variance for the cosine metric; the state's own eps guards
/// every running deviation and the stats-based batch deviations.
pub fn oracle_layer_drift(
    x: &Tensor4,
    s: &BnLayerState,
    metric: Metric,
    truncation: Option<f64>,
    eps: f64,
) -> f64 {
    let shape = x.shape();
    let [b, c, h, w] = shape;
    let raw = x.data();
    let refined = truncation.map(|r| oracle_truncate(x, r));
    let target_in: &[f64] = refined.as_deref().unwrap_or(raw);
    let (mean, var) = channel_stats(target_in, shape);

    match metric {
        Metric::Cosine => {
            let (mut sum, mut count) = (0.0, 0usize);
            for n in 0..b {
                for k in 0..c {
                    let sd_t = floor_std(var[k], eps);
                    let sd_s = floor_std(s.running_var[k], s.eps);
                    let g = s.gamma[k];
                    let g_safe = if g < 0.0 {
                        -g.abs().max(1e-6)
                    } else {
                        g.abs().max(1e-6)
                    };
                    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                    for p in 0..h * w {
                        let t = (at(target_in, shape, n, k, p) - mean[k]) / sd_t;
                        let y =
                            g * (at(raw, shape, n, k, p) - s.running_mean[k]) / sd_s + s.beta[k];
                        let u = (y - s.beta[k]) / g_safe;
                        dot += t * u;
                        na += t * t;
                        nb += u * u;
                    }
                    let (na, nb) = (na.sqrt(), nb.sqrt());
                    if na < 1e-12 || nb < 1e-12 {
                        continue;
                    }
                    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
                    sum += (1.0 - cos) / 2.0;
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        }
        Metric::Wasserstein | Metric::GaussianKl => {
            let mut sum = 0.0;
            for k in 0..c {
                let sigma = floor_std(s.running_var[k], s.eps);
                let sigma_bar = floor_std(var[k], s.eps);
                let dm = mean[k] - s.running_mean[k];
                sum += if metric == Metric::Wasserstein {
                    (dm * dm + (sigma_bar - sigma).powi(2)) / (sigma * sigma)
                } else {
                    let m = dm / sigma;
                    let v = (sigma_bar / sigma).powi(2);
                    ((v + m * m - 1.0 - v.ln()) / 2.0).max(0.0)
                };
            }
            sum / c as f64
        }
    }
}

/// A state whose running statistics equal the tensor's own batch statistics.
pub fn matched_state(x: &Tensor4, rng: &mut ChaCha8Rng) -> BnLayerState {
    let (mean, var) = channel_stats(x.data(), x.shape());
    let c = x.channels();
    let gamma = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    let beta = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    BnLayerState::new(gamma, beta, mean, var, 0.9, 0.0).unwrap()
}

/// Frobenius norm of `a - b`.
pub fn frobenius_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Seeded EMA run of `steps` Gaussian batches with `n` samples each.
/// Returns every running `(mean, var)` after each step.
pub fn ema_run(
    alpha: f64,
    true_mean: f64,
    true_sd: f64,
    n: usize,
    steps: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    use mde_core::bn::{batch_stats, ema_update};
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(true_mean, true_sd).unwrap();
    let mut s = BnLayerState::new(vec![1.0], vec![0.0], vec![0.0], vec![1.0], alpha, 1e-5).unwrap();
    let mut trail = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x = Tensor4::new(
            [n, 1, 1, 1],
            (0..n).map(|_| dist.sample(&mut rng)).collect(),
        )
        .unwrap();
        s = ema_update(&s, &batch_stats(&x).unwrap()).unwrap();
        trail.push((s.running_mean[0], s.running_var[0]));
    }
    trail
}

/// Small record exercising every header field; its bytes are frozen in
/// `tests/data/golden_model.mdet`.
pub fn golden_model_record() -> MdetRecord {
    let f = |name: &str, role, layer, shape: Vec<usize>, values: Vec<f64>| {
        MdetEntry::f32(name, role, Some(layer), shape, values)
    };
    MdetRecord {
        kind: RecordKind::Model,
        metadata: Metadata {
            model_id: "golden".into(),
            dataset_id: "none".into(),
            eps: 1e-5,
            retain_alpha: 0.9,
            creator: "golden-fixture".into(),
            seed: 42,
        },
        architecture: None,
        entries: vec![
            f(
                "layer0.weight",
                Role::Weight,
                0,
                vec![2, 1, 1, 1],
                vec![0.5, -1.25],
            ),
            f("layer0.bias", Role::Bias, 0, vec![2], vec![0.0, 0.125]),
            f("bn0.gamma", Role::BnGamma, 0, vec![2], vec![1.0, 2.0]),
            f("bn0.beta", Role::BnBeta, 0, vec![2], vec![0.0, -0.5]),
            f(
                "bn0.running_mean",
                Role::BnRunningMean,
                0,
                vec![2],
                vec![0.25, 3.0],
            ),
            f(
                "bn0.running_var",
                Role::BnRunningVar,
                0,
                vec![2],
                vec![1.0, 0.0625],
            ),
        ],
    }
}

/// One batch, one layer, two values: the example annotated in docs/format.md.
pub fn golden_trace_record() -> MdetRecord {
    MdetRecord {
        kind: RecordKind::Trace,
        metadata: Metadata {
            model_id: "m".into(),
            dataset_id: "d".into(),
            eps: 0.001,
            retain_alpha: 0.9,
            creator: "x".into(),
            seed: 7,
        },
        architecture: None,
        entries: vec![MdetEntry::f32(
            "act.b0.l0",
            Role::Activation,
            Some(0),
            vec![1, 1, 1, 2],
            vec![1.0, -2.0],
        )],
    }
}

pub fn data_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Outcome of one seeded corruption of a valid file.
#[derive(Debug, PartialEq, Eq)]
pub enum FuzzOutcome {
    Rejected,
    /// Parsed to the original record; the mutation hit payload bytes or
    /// a semantically neutral header byte.
    Identical,
    /// Parsed to a different record that re-encodes to exactly the mutated
    /// bytes, so the reader reported what the file says.
    Faithful,
}

/// Applies corruption `seed` to `bytes`: bit flips, byte overwrites,
/// truncation, insertion or header-length edits.
pub fn corrupt(bytes: &[u8], seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = bytes.to_vec();
    let header_end = 16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    // bias toward the preamble and header, where structure lives
    let pick = |rng: &mut ChaCha8Rng, len: usize| {
        if rng.random_bool(0.8) {
            rng.random_range(0..header_end.min(len))
        } else {
            rng.random_range(0..len)
        }
    };
    match rng.random_range(0..6) {
        0 => {
            for _ in 0..rng.random_range(1..=4) {
                let i = pick(&mut rng, out.len());
                out[i] ^= 1 << rng.random_range(0..8);
            }
        }
        1 => {
            let i = pick(&mut rng, out.len());
            out[i] = rng.random();
        }
        2 => {
            let keep = rng.random_range(0..out.len());
            out.truncate(keep);
        }
        3 => {
            let i = pick(&mut rng, out.len());
            let extra: Vec<u8> = (0..rng.random_range(1..8)).map(|_| rng.random()).collect();
            out.splice(i..i, extra);
        }
        4 => {
            let delta: i64 = rng.random_range(-64..64);
            let len = u64::from_le_bytes(out[8..16].try_into().unwrap()) as i64 + delta;
            out[8..16].copy_from_slice(&(len as u64).to_le_bytes());
        }
        _ => {
            // swap a digit inside the header text
            let i = rng.random_range(16..header_end);
            if out[i].is_ascii_digit() {
                out[i] = b'0' + rng.random_range(0..10);
            } else {
                out[i] = b'9';
            }
        }
    }
    out
}

/// Parses a corrupted file inside `catch_unwind`; `None` means it panicked
/// or returned something the bytes do not say.
pub fn fuzz_once(original: &MdetRecord, bytes: &[u8]) -> Option<FuzzOutcome> {
    let parsed = std::panic::catch_unwind(|| mde_core::mdet::from_bytes(bytes)).ok()?;
    Some(match parsed {
        Err(_) => FuzzOutcome::Rejected,
        Ok(r) if &r == original => FuzzOutcome::Identical,
        Ok(r) => {
            if mde_core::mdet::to_bytes(&r).ok()? != bytes {
                return None;
            }
            FuzzOutcome::Faithful
        }
    })
}

pub const EMA_STEPS: usize = 500;
pub const EMA_BATCH: usize = 64;
pub const EMA_MEAN: f64 = 2.0;
pub const EMA_SD: f64 = 1.5;

/// Seeds out of 20 where `|running_mean - m|` ends within three standard
/// errors of the EMA estimator at `alpha = 0.9`.
pub fn ema_mean_hits() -> usize {
    let alpha: f64 = 0.9;
    // stationary spread of an EMA over batch means
    let se = EMA_SD / (EMA_BATCH as f64).sqrt() * ((1.0 - alpha) / (1.0 + alpha)).sqrt();
    (0..20)
        .filter(|&seed| {
            let (m, _) = *ema_run(alpha, EMA_MEAN, EMA_SD, EMA_BATCH, EMA_STEPS, seed)
                .last()
                .unwrap();
            (m - EMA_MEAN).abs() <= 3.0 * se
        })
        .count()
}

/// `|running_var - true var|` once the whole stream has been consumed.
pub fn ema_var_gap(alpha: f64, seed: u64) -> f64 {
    let (_, v) = *ema_run(alpha, EMA_MEAN, EMA_SD, EMA_BATCH, EMA_STEPS, seed)
        .last()
        .unwrap();
    (v - EMA_SD * EMA_SD).abs()
}

pub const EMA_ALPHAS: [f64; 3] = [0.5, 0.9, 0.99];

/// Variance gaps for each alpha, one row per seed.
pub fn ema_gap_table() -> Vec<[f64; 3]> {
    (0..20u64)
        .map(|seed| EMA_ALPHAS.map(|a| ema_var_gap(a, 1000 + seed)))
        .collect()
}

/// Default toy network on a small synthetic batch, for gradient checks.
pub fn gradient_check_default(seed: u64) -> (usize, mde_core::net::GradientCheck) {
    use mde_core::net::{finite_difference_check, ToyModel};
    use mde_core::shift::{generate_dataset, IMAGE_SIZE};
    let data = generate_dataset(4, 2, seed).unwrap();
    let model = ToyModel::default_for([1, IMAGE_SIZE, IMAGE_SIZE], 4, seed).unwrap();
    let check = finite_difference_check(&model, &data.images, &data.labels).unwrap();
    (model.parameter_count(), check)
}

pub const GOLDEN_MODEL_SHA256: &str =
    "3c7e2de4abc67ec8814283eb39f678e32228e9779e16282f8c698c59ce0e78d8";
pub const GOLDEN_TRACE_SHA256: &str =
    "c022585eb577d00877478f075eca0bc5cd76dc02f5d81fb0ad637248be550330";

/// Golden fixtures as `(file name, record, frozen digest)`.
pub fn golden_fixtures() -> [(&'static str, MdetRecord, &'static str); 2] {
    [
        (
            "golden_model.mdet",
            golden_model_record(),
            GOLDEN_MODEL_SHA256,
        ),
        (
            "golden_trace.mdet",
            golden_trace_record(),
            GOLDEN_TRACE_SHA256,
        ),
    ]
}

/// Rewrites the golden files when `MDE_BLESS` is set.
pub fn bless_goldens() {
    if std::env::var_os("MDE_BLESS").is_none() {
        return;
    }
    for (name, record, _) in golden_fixtures() {
        let bytes = mde_core::mdet::to_bytes(&record).unwrap();
        std::fs::write(data_path(name), &bytes).unwrap();
        eprintln!("{name}: {}", sha256_hex(&bytes));
    }
}

/// Names of golden files whose bytes differ from the writer or the digest.
pub fn golden_mismatches() -> Vec<String> {
    golden_fixtures()
        .into_iter()
        .filter_map(|(name, record, digest)| {
            let on_disk = std::fs::read(data_path(name)).ok()?;
            let written = mde_core::mdet::to_bytes(&record).ok()?;
            let parsed = mde_core::mdet::from_bytes(&on_disk).ok();
            let ok = on_disk == written
                && sha256_hex(&on_disk) == digest
                && parsed.as_ref() == Some(&record);
            (!ok).then(|| name.to_string())
        })
        .chain(
            golden_fixtures()
                .into_iter()
                .filter(|(name, ..)| !data_path(name).exists())
                .map(|(name, ..)| format!("{name} missing")),
        )
        .collect()
}

/// One record of each kind, normalised through a write/read cycle so every
/// value is exactly representable on disk.
pub fn sample_records(seed: u64) -> Vec<MdetRecord> {
    use mde_core::mdet::{
        from_bytes, model_record, synthetic_dataset_record, to_bytes, trace_record,
    };
    use mde_core::net::ToyModel;
    use mde_core::shift::{generate_dataset, IMAGE_SIZE};
    let model = ToyModel::default_for([1, IMAGE_SIZE, IMAGE_SIZE], 3, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches: Vec<Vec<Tensor4>> = (0..2)
        .map(|_| {
            vec![
                random_tensor([3, 2, 2, 2], &mut rng),
                random_tensor([3, 4, 1, 1], &mut rng),
            ]
        })
        .collect();
    let meta = Metadata {
        model_id: "m".into(),
        dataset_id: "d".into(),
        seed,
        ..Metadata::default()
    };
    let data = generate_dataset(3, 2, seed).unwrap();
    [
        model_record(&model, "toy").unwrap(),
        trace_record(&batches, meta).unwrap(),
        synthetic_dataset_record(&data, "blobs", seed).unwrap(),
        golden_model_record(),
        golden_trace_record(),
    ]
    .iter()
    .map(|r| from_bytes(&to_bytes(r).unwrap()).unwrap())
    .collect()
}

/// Outcome tallies over `count` seeded corruptions; `failures` counts
/// panics and misreported parses.
#[derive(Debug, Default)]
pub struct FuzzTally {
    pub rejected: usize,
    pub identical: usize,
    pub faithful: usize,
    pub failures: usize,
}

pub fn fuzz_campaign(count: u64) -> FuzzTally {
    let records = sample_records(11);
    let encoded: Vec<Vec<u8>> = records
        .iter()
        .map(|r| mde_core::mdet::to_bytes(r).unwrap())
        .collect();
    let mut tally = FuzzTally::default();
    for seed in 0..count {
        let k = seed as usize % records.len();
        match fuzz_once(&records[k], &corrupt(&encoded[k], seed)) {
            Some(FuzzOutcome::Rejected) => tally.rejected += 1,
            Some(FuzzOutcome::Identical) => tally.identical += 1,
            Some(FuzzOutcome::Faithful) => tally.faithful += 1,
            None => tally.failures += 1,
        }
    }
    tally
}

/// Random matrix up to 32x64 with entries in [-1, 1).
pub fn random_matrix(seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..=32);
    let cols = rng.random_range(1..=64);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn gram_error(m: &Matrix) -> f64 {
    let g = m.transpose().matmul(m).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            worst = worst.max((g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

pub fn rel_reconstruction_error(m: &Matrix, d: &mde_core::svd::SvdResult) -> f64 {
    let r = d.reconstruct(d.rank());
    frobenius_diff(r.data(), m.data())
        / frobenius_diff(m.data(), &vec![0.0; m.data().len()]).max(1e-300)
}
