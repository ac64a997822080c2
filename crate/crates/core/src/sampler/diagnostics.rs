//! Rank-normalised split R-hat and bulk effective sample size.

use serde::{Deserialize, Serialize};

use super::{PosteriorDraws, SamplerError};
use crate::stats::{mean, normal_quantile, sample_variance};

pub const MIN_CHAINS: usize = 2;
pub const MIN_DRAWS: usize = 100;
/// Post-warmup divergence rate above which a run is flagged.
pub const DIVERGENCE_FLAG_RATE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    /// `None` when the draws are degenerate.
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
    /// Set when some split chain has zero variance.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub parameters: Vec<ParameterDiagnostics>,
    pub divergences: Vec<usize>,
    pub divergence_rate: f64,
    pub divergence_flag: bool,
    pub step_sizes: Vec<f64>,
    pub mean_accept_stat: Vec<f64>,
}

impl DiagnosticsReport {
    /// Largest R-hat over non-degenerate parameters.
    pub fn max_rhat(&self) -> Option<f64> {
        self.parameters
            .iter()
            .filter_map(|p| p.rhat)
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }

    pub fn min_ess_bulk(&self) -> Option<f64> {
        self.parameters
            .iter()
            .filter_map(|p| p.ess_bulk)
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.min(v))))
    }

    pub fn any_degenerate(&self) -> bool {
        self.parameters.iter().any(|p| p.degenerate)
    }
}

pub fn diagnostics(pd: &PosteriorDraws) -> Result<DiagnosticsReport, SamplerError> {
    if pd.n_chains() < MIN_CHAINS || pd.n_draws < MIN_DRAWS {
        return Err(SamplerError::TooFewDraws {
            min_chains: MIN_CHAINS,
            min_draws: MIN_DRAWS,
        });
    }
    let parameters = (0..pd.dim)
        .map(|j| {
            let series: Vec<Vec<f64>> = (0..pd.n_chains()).map(|c| pd.coordinate(c, j)).collect();
            let refs: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
            let rhat = split_rhat(&refs);
            let ess = ess_bulk(&refs);
            ParameterDiagnostics {
                rhat,
                ess_bulk: ess,
                degenerate: rhat.is_none(),
            }
        })
        .collect();
    let divergences = pd.divergence_counts();
    let divergence_rate = divergences.iter().sum::<usize>() as f64 / pd.total_draws() as f64;
    Ok(DiagnosticsReport {
        parameters,
        divergences,
        divergence_rate,
        divergence_flag: divergence_rate > DIVERGENCE_FLAG_RATE,
        step_sizes: pd.chains.iter().map(|c| c.step_size).collect(),
        mean_accept_stat: pd.chains.iter().map(|c| c.mean_accept_stat()).collect(),
    })
}

/// Splits each chain into halves, dropping the middle draw of odd lengths.
fn split(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

/// Normal scores of pooled ranks, with ties given their average rank.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut flat: Vec<(f64, usize)> = chains
        .iter()
        .flatten()
        .copied()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    let s = flat.len();
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && flat[j + 1].0 == flat[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &flat[i..=j] {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let z: Vec<f64> = ranks
        .iter()
        .map(|r| normal_quantile((r - 0.375) / (s as f64 + 0.25)))
        .collect();
    let mut out = Vec::with_capacity(chains.len());
    let mut off = 0;
    for c in chains {
        out.push(z[off..off + c.len()].to_vec());
        off += c.len();
    }
    out
}

fn has_constant_chain(chains: &[Vec<f64>]) -> bool {
    chains.iter().any(|c| c.iter().all(|v| *v == c[0]))
}

fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let b_over_n = sample_variance(&means);
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Rank-normalised split R-hat: the larger of the bulk and folded-tail
/// versions. `None` when a split chain is constant or too short.
pub fn split_rhat(chains: &[&[f64]]) -> Option<f64> {
    let halves = split(chains);
    if halves.is_empty() || halves[0].len() < 2 || has_constant_chain(&halves) {
        return None;
    }
    let bulk = basic_rhat(&rank_normalize(&halves));
    let all: Vec<f64> = halves.iter().flatten().copied().collect();
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let med = crate::stats::interpolated_quantile_sorted(&sorted, 0.5);
    let folded: Vec<Vec<f64>> = halves
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let tail = if has_constant_chain(&folded) {
        bulk
    } else {
        basic_rhat(&rank_normalize(&folded))
    };
    Some(bulk.max(tail))
}

fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone sequence.
fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov_at = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| autocov(c, *mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let chain_var: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| autocov(c, *mu, 0) * n as f64 / (n as f64 - 1.0))
        .collect();
    let mean_var = mean(&chain_var);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_variance(&means);
    }
    let mut rho = vec![0.0; n + 1];
    let mut rho_even = 1.0;
    rho[0] = rho_even;
    let mut rho_odd = 1.0 - (mean_var - acov_at(1)) / var_plus;
    rho[1] = rho_odd;
    let mut s = 1;
    while s + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - acov_at(s + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov_at(s + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho_even > 0.0 {
        rho[max_s + 1] = rho_even;
    }
    let mut t = 1;
    while t + 3 <= max_s {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + rho[max_s + 1])
        .max(1.0 / total.log10());
    total / tau
}

/// Bulk effective sample size on rank-normalised split chains.
pub fn ess_bulk(chains: &[&[f64]]) -> Option<f64> {
    let halves = split(chains);
    if halves.is_empty() || halves[0].len() < 4 || has_constant_chain(&halves) {
        return None;
    }
    Some(ess(&rank_normalize(&halves)))
}
