use crate::numeric::{mean, sample_variance};

/// Potential scale reduction factor of equal-length chains,
/// `√(((L−1)/L·W + B/L)/W)`. Identical constant chains give 1; zero
/// within-chain variance otherwise gives `+∞`.
pub fn gelman_rubin(chains: &[&[f64]]) -> f64 {
    let m = chains.len();
    let l = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m < 2 || l < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..l])).collect();
    let w = chains.iter().map(|c| sample_variance(&c[..l])).sum::<f64>() / m as f64;
    let b_over_l = sample_variance(&means);
    if w == 0.0 {
        return if b_over_l == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let lf = l as f64;
    (((lf - 1.0) / lf * w + b_over_l) / w).sqrt()
}

/// Monte Carlo standard error of a chain mean by non-overlapping batch means.
pub fn batch_means_se(series: &[f64], batches: usize) -> f64 {
    let size = series.len() / batches;
    if size == 0 || batches < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches).map(|b| mean(&series[b * size..(b + 1) * size])).collect();
    (sample_variance(&means) / batches as f64).sqrt()
}
