//! Weighted direct estimates per tract with successive-difference
//! replication standard errors.
//!
//! Sampled units are taken in sample order; unit `i` is paired with rows
//! `a_i = 1 + i mod (R - 1)` and `b_i = 1 + (i + 1) mod (R - 1)` of an order-`R`
//! Hadamard matrix `H` (row 0, all ones, is unused). Replicate `r` multiplies
//! the unit's weight by `1 + 2^{-3/2} (H[a_i][r] - H[b_i][r])`, and the
//! variance of a statistic is `(4 / R) Σ_r (θ_r - θ)²`.

use serde::{Deserialize, Serialize};

use super::hadamard::hadamard;
use super::sample::Sample;
use super::SynthError;

/// Upper edges of the first eleven of the twelve published income bins.
pub const ACS_BREAKS: [f64; 11] = [
    5000.0, 10000.0, 15000.0, 20000.0, 25000.0, 35000.0, 50000.0, 75000.0, 100000.0, 150000.0,
    200000.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractDirect {
    pub n_sampled: usize,
    pub bins: Vec<Estimate>,
    pub mean: Estimate,
    pub median: Estimate,
    /// Every fifth percentile, `τ = 0.05, …, 0.95`.
    pub percentiles: Vec<(f64, Estimate)>,
    pub gini: Estimate,
}

impl TractDirect {
    pub fn percentile(&self, tau: f64) -> Option<Estimate> {
        self.percentiles
            .iter()
            .find(|(t, _)| (t - tau).abs() < 1e-9)
            .map(|(_, e)| *e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimateSet {
    pub breaks: Vec<f64>,
    /// `None` for tracts without sampled households.
    pub tracts: Vec<Option<TractDirect>>,
    pub n_replicates: usize,
    pub sampling_fraction: f64,
}

pub(crate) fn percentile_levels() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

/// `factors[i][r]` for `n` units and `r_rep` replicates.
pub fn replicate_factors(n: usize, r_rep: usize) -> Result<Vec<Vec<f64>>, SynthError> {
    if r_rep < 4 || r_rep % 4 != 0 {
        return Err(SynthError::Input(format!(
            "replicate count must be a positive multiple of 4, got {r_rep}"
        )));
    }
    let h = hadamard(r_rep)?;
    let c = 2f64.powf(-1.5);
    let rows = r_rep - 1;
    Ok((0..n)
        .map(|i| {
            let a = 1 + i % rows;
            let b = 1 + (i + 1) % rows;
            (0..r_rep)
                .map(|r| 1.0 + c * f64::from(h[a][r] - h[b][r]))
                .collect()
        })
        .collect())
}

/// Smallest `x_i` whose cumulative weight share reaches `tau`.
fn weighted_type1_quantile(x: &[f64], w: &[f64], total: f64, tau: f64) -> f64 {
    let target = tau * total * (1.0 - 1e-12);
    let mut c = 0.0;
    for (xi, wi) in x.iter().zip(w) {
        c += wi;
        if c >= target {
            return *xi;
        }
    }
    x[x.len() - 1]
}

/// Bin shares, mean, median, percentiles and Gini of ascending `x` with
/// weights `w`, flattened in that order.
fn statistics(x: &[f64], w: &[f64], breaks: &[f64], taus: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; breaks.len() + 1];
    for (xi, wi) in x.iter().zip(w) {
        out[breaks.partition_point(|b| *b <= *xi)] += wi;
    }
    out.iter_mut().for_each(|v| *v /= total);
    // centred on the minimum so constant data give an exact mean
    let x0 = x[0];
    let shifted: f64 = x.iter().zip(w).map(|(a, b)| (a - x0) * b).sum();
    let wx = shifted + x0 * total;
    out.push(x0 + shifted / total);
    out.push(weighted_type1_quantile(x, w, total, 0.5));
    out.extend(taus.iter().map(|t| weighted_type1_quantile(x, w, total, *t)));
    let mut c = 0.0;
    let mut s = 0.0;
    for (xi, wi) in x.iter().zip(w) {
        c += wi;
        s += wi * xi * (2.0 * c - wi - total);
    }
    out.push(if wx > 0.0 { s / (total * wx) } else { f64::NAN });
    out
}

/// Direct estimates for tracts `0..n_tracts` from a weighted sample.
pub fn direct_estimates_with_sdr(
    sample: &Sample,
    n_tracts: usize,
    breaks: &[f64],
    r_rep: usize,
) -> Result<DirectEstimateSet, SynthError> {
    if breaks.windows(2).any(|p| !(p[0] < p[1])) || breaks.iter().any(|b| !(*b > 0.0)) {
        return Err(SynthError::Input("breaks must be positive and increasing".into()));
    }
    let factors = replicate_factors(sample.units.len(), r_rep)?;
    let taus = percentile_levels();
    let k = breaks.len() + 1;
    let mut by_tract: Vec<Vec<usize>> = vec![Vec::new(); n_tracts];
    for (i, u) in sample.units.iter().enumerate() {
        if u.tract >= n_tracts {
            return Err(SynthError::Input(format!("unit in unknown tract {}", u.tract)));
        }
        by_tract[u.tract].push(i);
    }
    let tracts = by_tract
        .into_iter()
        .map(|mut idx| {
            if idx.is_empty() {
                return None;
            }
            idx.sort_by(|a, b| sample.units[*a].income.total_cmp(&sample.units[*b].income));
            let x: Vec<f64> = idx.iter().map(|i| sample.units[*i].income).collect();
            let w: Vec<f64> = idx.iter().map(|i| sample.units[*i].weight).collect();
            let full = statistics(&x, &w, breaks, &taus);
            let mut ss = vec![0.0; full.len()];
            for r in 0..r_rep {
                let wr: Vec<f64> = idx.iter().zip(&w).map(|(i, wi)| wi * factors[*i][r]).collect();
                for (acc, (t, t0)) in ss.iter_mut().zip(statistics(&x, &wr, breaks, &taus).iter().zip(&full)) {
                    *acc += (t - t0).powi(2);
                }
            }
            let est: Vec<Estimate> = full
                .iter()
                .zip(&ss)
                .map(|(v, s)| Estimate {
                    value: *v,
                    se: (4.0 / r_rep as f64 * s).sqrt(),
                })
                .collect();
            Some(TractDirect {
                n_sampled: idx.len(),
                bins: est[..k].to_vec(),
                mean: est[k],
                median: est[k + 1],
                percentiles: taus.iter().copied().zip(est[k + 2..k + 2 + taus.len()].iter().copied()).collect(),
                gini: est[k + 2 + taus.len()],
            })
        })
        .collect();
    let total_weight: f64 = sample.units.iter().map(|u| u.weight).sum();
    Ok(DirectEstimateSet {
        breaks: breaks.to_vec(),
        tracts,
        n_replicates: r_rep,
        sampling_fraction: if total_weight > 0.0 {
            sample.units.len() as f64 / total_weight
        } else {
            0.0
        },
    })
}
