//! Running-estimate convergence under a stationary Gaussian stream.

mod common;

use common::*;

#[test]
fn running_mean_tracks_true_mean() {
    let hits = ema_mean_hits();
    assert!(hits >= 18, "{hits}/20 seeds within 3 standard errors");
}

#[test]
fn seed_averaged_variance_gap_shrinks_as_alpha_grows() {
    // a larger retain factor averages more batches, so the variance gap
    // left by sampling noise shrinks
    let table = ema_gap_table();
    let mean = |i: usize| table.iter().map(|r| r[i]).sum::<f64>() / table.len() as f64;
    let (g50, g90, g99) = (mean(0), mean(1), mean(2));
    assert!(g50 > g90 && g90 > g99, "{g50} {g90} {g99}");
}

#[test]
fn alpha_extremes() {
    let frozen = ema_run(1.0, EMA_MEAN, EMA_SD, EMA_BATCH, 10, 0);
    assert!(frozen.iter().all(|&(m, v)| m == 0.0 && v == 1.0));
    let memoryless = ema_run(0.0, EMA_MEAN, EMA_SD, 4096, 1, 0);
    assert!((memoryless[0].0 - EMA_MEAN).abs() < 0.1);
    assert!((memoryless[0].1 - EMA_SD * EMA_SD).abs() < 0.2);
}
