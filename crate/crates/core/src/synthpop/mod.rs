//! Synthetic finite populations for repeated-sampling studies.
//!
//! A world is built from a weighted reference microdata sample: every distinct
//! weight `w_s` defines a stratum of `n_s` reference records and population
//! `round(n_s w_s)`. Strata are spread over tracts greedily, and incomes come
//! from a two-component lognormal mixture whose parameters depend on a tract
//! covariate (standardized distance from the centre of the layout) and a
//! stratum covariate (standardized log weight).

pub mod direct;
mod hadamard;
pub mod sample;
pub mod simulation;

pub use direct::{direct_estimates_with_sdr, DirectEstimateSet, Estimate, TractDirect, ACS_BREAKS};
pub use hadamard::hadamard;
pub use sample::{proportional_allocation, sample_with_allocation, stratified_sample, Sample, SampleUnit};
pub use simulation::{run_simulation, SimulationConfig, SimulationReport};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::chain_rng;
use crate::stats::{mean, sample_variance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid input: {0}")]
    Input(String),
}

/// Reference records of one stratum, as `z = ln(income + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStratum {
    pub weight: f64,
    pub sample_size: usize,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub strata: Vec<ReferenceStratum>,
}

/// Shrunken location and spread of one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub d: f64,
    pub h: f64,
}

impl ReferenceSample {
    /// Groups `(income, weight)` records into strata of equal weight, ordered
    /// by weight.
    pub fn from_weighted_incomes(rows: &[(f64, f64)]) -> Result<Self, SynthError> {
        let mut rows: Vec<(f64, f64)> = rows.to_vec();
        if rows.is_empty() {
            return Err(SynthError::Input("reference sample is empty".into()));
        }
        if rows
            .iter()
            .any(|(y, w)| !(y.is_finite() && *y >= 0.0 && w.is_finite() && *w > 0.0))
        {
            return Err(SynthError::Input(
                "reference incomes must be >= 0 and weights > 0".into(),
            ));
        }
        rows.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut strata: Vec<ReferenceStratum> = Vec::new();
        for (y, w) in rows {
            let z = (y + 1.0).ln();
            match strata.last_mut() {
                Some(s) if s.weight == w => {
                    s.z.push(z);
                    s.sample_size += 1;
                }
                _ => strata.push(ReferenceStratum {
                    weight: w,
                    sample_size: 1,
                    z: vec![z],
                }),
            }
        }
        Ok(Self { strata })
    }

    /// A made-up reference sample of roughly `households / mean weight`
    /// records in `n_strata` strata with distinct weights between 8 and 32.
    pub fn synthetic(n_strata: usize, households: usize, seed: u64) -> Result<Self, SynthError> {
        if n_strata == 0 || households < n_strata {
            return Err(SynthError::Input(
                "need at least one stratum and one household per stratum".into(),
            ));
        }
        let mut rng = chain_rng(seed, 0);
        let noise = Normal::new(0.0, 0.9).expect("valid normal");
        let centre = Normal::new(10.9, 0.35).expect("valid normal");
        let strata = (0..n_strata)
            .map(|s| {
                let weight = if n_strata == 1 {
                    20.0
                } else {
                    8.0 + 24.0 * s as f64 / (n_strata - 1) as f64
                };
                let share = households as f64 / (n_strata as f64 * weight);
                let n = ((share * rng.random_range(0.6..1.4)).round() as usize).max(1);
                let m: f64 = centre.sample(&mut rng);
                let z = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < 0.02 {
                            0.0
                        } else {
                            (m + noise.sample(&mut rng)).exp().ln_1p()
                        }
                    })
                    .collect();
                ReferenceStratum {
                    weight,
                    sample_size: n,
                    z,
                }
            })
            .collect();
        Ok(Self { strata })
    }

    /// Mean and sample standard deviation of all reference `z`.
    pub fn moments(&self) -> (f64, f64) {
        let all: Vec<f64> = self.strata.iter().flat_map(|s| s.z.iter().copied()).collect();
        (mean(&all), sample_variance(&all).sqrt())
    }

    /// `D_s` shrunk toward 0 with 5 pseudo-records and `H_s²` blended with
    /// the overall variance at 500 pseudo-records. Strata without records get
    /// `D_s = 0`, `H_s = ŝ`.
    pub fn stratum_stats(&self) -> Vec<StratumStats> {
        let (m_hat, s_hat) = self.moments();
        self.strata
            .iter()
            .map(|s| {
                if s.z.is_empty() {
                    log::warn!("stratum with weight {} has no reference records", s.weight);
                    return StratumStats { d: 0.0, h: s_hat };
                }
                let n = s.z.len() as f64;
                let d = s.z.iter().map(|z| z - m_hat).sum::<f64>() / (n + 5.0);
                let zbar = mean(&s.z);
                let within = s.z.iter().map(|z| (z - zbar).powi(2)).sum::<f64>() / n;
                let h2 = n / (n + 500.0) * within + 500.0 / (n + 500.0) * s_hat * s_hat;
                StratumStats { d, h: h2.sqrt() }
            })
            .collect()
    }

    /// Weighted shares of reference incomes in the bins cut by `breaks`.
    pub fn weighted_bin_shares(&self, breaks: &[f64]) -> Vec<f64> {
        let mut shares = vec![0.0; breaks.len() + 1];
        let mut total = 0.0;
        for s in &self.strata {
            for z in &s.z {
                let y = z.exp() - 1.0;
                let k = breaks.partition_point(|b| *b <= y);
                shares[k] += s.weight;
                total += s.weight;
            }
        }
        shares.iter_mut().for_each(|v| *v /= total);
        shares
    }
}

/// Mixture parameters of one tract/stratum cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub omega: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl MixtureParams {
    pub fn new(m_hat: f64, sdist: f64, w_std: f64, stats: StratumStats) -> Self {
        let ln_h = stats.h.ln();
        Self {
            omega: 1.0 / (1.0 + (0.2 * sdist + 0.2 * w_std).exp()),
            mu1: 0.87 * m_hat - 0.3 * sdist + stats.d,
            mu2: 1.05 * m_hat - 0.2 * sdist + 1.5 * stats.d,
            sigma1: (sdist / 5.0 - ln_h / 5.0).exp(),
            sigma2: 0.6 * (sdist / 5.0 - (ln_h - 0.6f64.ln()) / 5.0).exp(),
        }
    }

    pub fn mean_z(&self) -> f64 {
        self.omega * self.mu1 + (1.0 - self.omega) * self.mu2
    }

    pub fn variance_z(&self) -> f64 {
        let m = self.mean_z();
        self.omega * (self.sigma1.powi(2) + self.mu1.powi(2))
            + (1.0 - self.omega) * (self.sigma2.powi(2) + self.mu2.powi(2))
            - m * m
    }

    pub fn sample_z<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (mu, sigma) = if rng.random::<f64>() < self.omega {
            (self.mu1, self.sigma1)
        } else {
            (self.mu2, self.sigma2)
        };
        mu + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
    }
}

/// `(x - mean) / sd` with the `n - 1` standard deviation; all zeros when the
/// spread is zero.
pub fn standardize(xs: &[f64]) -> Vec<f64> {
    let m = mean(xs);
    let sd = sample_variance(xs).sqrt();
    if !(sd > 0.0) {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - m) / sd).collect()
}

/// Standardized distance of each centroid from the centre of their bounding
/// box.
pub fn standardized_center_distance(centroids: &[(f64, f64)]) -> Vec<f64> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in centroids {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let dist: Vec<f64> = centroids
        .iter()
        .map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .collect();
    standardize(&dist)
}

/// Centroids on a sunflower spiral: tract 0 in the middle, later tracts
/// further out.
pub fn ring_layout(n: usize) -> Vec<(f64, f64)> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let r = (i as f64).sqrt();
            let a = golden * i as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Greedy assignment of stratum populations to tract targets. For each tract
/// a random stratum with remaining population is drawn and as much of it as
/// fits is assigned, until the tract is full. Returns `counts[tract][stratum]`.
pub fn assign_strata<R: Rng + ?Sized>(
    tract_targets: &[usize],
    stratum_pops: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, SynthError> {
    let need: usize = tract_targets.iter().sum();
    let have: usize = stratum_pops.iter().sum();
    if need != have {
        return Err(SynthError::Input(format!(
            "tract targets total {need} but strata total {have}"
        )));
    }
    let mut remaining = stratum_pops.to_vec();
    let mut pool: Vec<usize> = (0..remaining.len()).filter(|&s| remaining[s] > 0).collect();
    let mut counts = vec![vec![0usize; stratum_pops.len()]; tract_targets.len()];
    for (r, &target) in tract_targets.iter().enumerate() {
        let mut pop = 0;
        while pop < target {
            let slot = rng.random_range(0..pool.len());
            let s = pool[slot];
            let p = remaining[s].min(target - pop);
            counts[r][s] += p;
            pop += p;
            remaining[s] -= p;
            if remaining[s] == 0 {
                pool.swap_remove(slot);
            }
        }
    }
    Ok(counts)
}

/// Splits `total` into `n` parts of similar size (±30%) that sum exactly.
pub fn split_total<R: Rng + ?Sized>(total: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.7..1.3)).collect();
    let s: f64 = raw.iter().sum();
    let mut parts: Vec<usize> = raw
        .iter()
        .map(|v| (v / s * total as f64).floor() as usize)
        .collect();
    let short = total - parts.iter().sum::<usize>();
    for p in parts.iter_mut().take(short) {
        *p += 1;
    }
    parts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_tracts: usize,
    /// Tract centroids; a ring layout is used when absent.
    pub centroids: Option<Vec<(f64, f64)>>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_tracts: 5,
            centroids: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumInfo {
    pub weight: f64,
    pub sample_size: usize,
    pub population: usize,
}

/// A finite population. Households are stored tract by tract and, within a
/// tract, stratum by stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub tract_targets: Vec<usize>,
    pub sdist: Vec<f64>,
    pub strata: Vec<StratumInfo>,
    pub w_std: Vec<f64>,
    /// `counts[tract][stratum]`.
    pub counts: Vec<Vec<usize>>,
    pub incomes: Vec<f64>,
}

impl SyntheticWorld {
    /// Strata, tract targets and the assignment, without incomes.
    pub fn layout(reference: &ReferenceSample, cfg: &WorldConfig) -> Result<Self, SynthError> {
        if cfg.n_tracts == 0 {
            return Err(SynthError::Input("need at least one tract".into()));
        }
        if reference.strata.iter().any(|s| !(s.weight > 0.0)) {
            return Err(SynthError::Input("stratum weights must be > 0".into()));
        }
        let strata: Vec<StratumInfo> = reference
            .strata
            .iter()
            .map(|s| StratumInfo {
                weight: s.weight,
                sample_size: s.sample_size,
                population: (s.sample_size as f64 * s.weight).round() as usize,
            })
            .collect();
        let total: usize = strata.iter().map(|s| s.population).sum();
        if total < cfg.n_tracts {
            return Err(SynthError::Input(format!(
                "population {total} is smaller than the number of tracts"
            )));
        }
        let centroids = match &cfg.centroids {
            Some(c) if c.len() != cfg.n_tracts => {
                return Err(SynthError::Input(format!(
                    "{} centroids for {} tracts",
                    c.len(),
                    cfg.n_tracts
                )))
            }
            Some(c) => c.clone(),
            None => ring_layout(cfg.n_tracts),
        };
        let mut rng = chain_rng(cfg.seed, 1);
        let tract_targets = split_total(total, cfg.n_tracts, &mut rng);
        let pops: Vec<usize> = strata.iter().map(|s| s.population).collect();
        let counts = assign_strata(&tract_targets, &pops, &mut rng)?;
        let log_w: Vec<f64> = strata.iter().map(|s| s.weight.ln()).collect();
        Ok(Self {
            tract_targets,
            sdist: standardized_center_distance(&centroids),
            w_std: standardize(&log_w),
            strata,
            counts,
            incomes: Vec::new(),
        })
    }

    /// Layout plus incomes.
    pub fn generate(reference: &ReferenceSample, cfg: &WorldConfig) -> Result<Self, SynthError> {
        let mut world = Self::layout(reference, cfg)?;
        let mut rng = chain_rng(cfg.seed, 2);
        world.incomes = generate_incomes(&world, reference, &mut rng)?;
        Ok(world)
    }

    pub fn n_tracts(&self) -> usize {
        self.tract_targets.len()
    }

    pub fn n_households(&self) -> usize {
        self.tract_targets.iter().sum()
    }

    /// `(tract, stratum)` of every household in storage order.
    pub fn households(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.counts.iter().enumerate().flat_map(|(r, row)| {
            row.iter()
                .enumerate()
                .flat_map(move |(s, &c)| std::iter::repeat_n((r, s), c))
        })
    }

    /// Index range of tract `r` in storage order.
    pub fn tract_range(&self, r: usize) -> std::ops::Range<usize> {
        let start: usize = self.tract_targets[..r].iter().sum();
        start..start + self.tract_targets[r]
    }

    /// Ascending incomes of tract `r`.
    pub fn sorted_tract_incomes(&self, r: usize) -> Vec<f64> {
        let mut v = self.incomes[self.tract_range(r)].to_vec();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Household indices of every stratum, in storage order.
    pub fn stratum_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.strata.len()];
        for (i, (_, s)) in self.households().enumerate() {
            members[s].push(i);
        }
        members
    }
}

/// Draws every household's income from its cell's mixture on
/// `z = ln(income + 1)`, returning `max(e^z - 1, 0)`.
pub fn generate_incomes<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    reference: &ReferenceSample,
    rng: &mut R,
) -> Result<Vec<f64>, SynthError> {
    if reference.strata.len() != world.strata.len() {
        return Err(SynthError::Input(format!(
            "reference has {} strata, world has {}",
            reference.strata.len(),
            world.strata.len()
        )));
    }
    let (m_hat, _) = reference.moments();
    let stats = reference.stratum_stats();
    let mut incomes = Vec::with_capacity(world.n_households());
    for (r, row) in world.counts.iter().enumerate() {
        for (s, &c) in row.iter().enumerate() {
            let params = MixtureParams::new(m_hat, world.sdist[r], world.w_std[s], stats[s]);
            for _ in 0..c {
                incomes.push((params.sample_z(rng).exp() - 1.0).max(0.0));
            }
        }
    }
    Ok(incomes)
}
