//! Small numerical helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^x)` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// The `⌊x⌉` rounding used throughout: nearest integer, ties to even.
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse-CDF draw from `N(mean, sd²)` truncated to `[lo, hi]` given a
/// uniform `u` in `[0, 1)`.
pub fn truncated_normal_inverse(mean: f64, sd: f64, lo: f64, hi: f64, u: f64) -> f64 {
    if sd == 0.0 {
        return mean.clamp(lo, hi);
    }
    let a = normal_cdf((lo - mean) / sd);
    let b = normal_cdf((hi - mean) / sd);
    let p = a + u * (b - a);
    let x = if p <= 0.0 || p >= 1.0 || b - a <= 0.0 { mean.clamp(lo, hi) } else { mean + sd * normal_quantile(p) };
    x.clamp(lo, hi)
}

/// Closed-form mean of `N(mean, sd²)` truncated to `[lo, hi]`.
pub fn truncated_normal_mean(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let alpha = (lo - mean) / sd;
    let beta = (hi - mean) / sd;
    let z = normal_cdf(beta) - normal_cdf(alpha);
    mean + sd * (normal_pdf(alpha) - normal_pdf(beta)) / z
}

/// Closed-form variance of the truncated normal.
pub fn truncated_normal_variance(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let alpha = (lo - mean) / sd;
    let beta = (hi - mean) / sd;
    let z = normal_cdf(beta) - normal_cdf(alpha);
    let (pa, pb) = (normal_pdf(alpha), normal_pdf(beta));
    let r = (pa - pb) / z;
    sd * sd * (1.0 + (alpha * pa - beta * pb) / z - r * r)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with denominator `n - 1`.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Population standard deviation (denominator `n`).
pub fn population_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
