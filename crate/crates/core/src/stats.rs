//! Small numerical helpers shared across modules.

use std::f64::consts::PI;

/// `log N(x; mu, sd²)`.
pub fn normal_ln_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * z * z
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// `log Σ exp(v_i)`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with an `n - 1` denominator; 0 for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Type-1 sample quantile of sorted data: the left-continuous inverse of the
/// empirical CDF, `x_(ceil(n·τ))`.
pub fn type1_quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    let idx = ((tau * n as f64).ceil() as usize).clamp(1, n);
    sorted[idx - 1]
}

/// Linearly interpolated (type-7) quantile of sorted data, used for posterior
/// summaries across draws.
pub fn interpolated_quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Gini coefficient `Σ_i Σ_j |y_i - y_j| / (2 n² ȳ)` of sorted values via the
/// rank identity; `None` when the mean is not positive.
pub fn gini_sorted(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let total: f64 = sorted.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let nf = n as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, y)| (2.0 * (i + 1) as f64 - nf - 1.0) * y)
        .sum();
    Some(weighted / (nf * total))
}
