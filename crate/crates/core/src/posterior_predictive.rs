//! Posterior-predictive finite populations and the features computed on them.
//!
//! For each retained draw a population of size `N` is simulated from the
//! draw's density and every requested feature is evaluated on it. Draw `m`
//! uses `ChaCha8Rng::seed_from_u64(seed)` on stream `m`, so results are the
//! same however the work is split across threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::PiecewiseDensity;
use crate::model::{ModelError, ModelSpec};
use crate::sampler::{chain_rng, PosteriorDraws};
use crate::stats::{gini_sorted, interpolated_quantile_sorted, mean, type1_quantile_sorted};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictiveError {
    #[error("invalid feature request: {0}")]
    Request(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A distributional feature of a finite population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "feature", rename_all = "snake_case")]
pub enum Feature {
    Percentile { tau: f64 },
    Mean,
    Gini,
}

impl Feature {
    /// The 5th, 10th, …, 95th percentiles.
    pub fn every_fifth_percentile() -> Vec<Feature> {
        (1..20)
            .map(|i| Feature::Percentile {
                tau: i as f64 / 20.0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        match self {
            Feature::Percentile { tau } => format!("p{}", fmt_tau(*tau)),
            Feature::Mean => "mean".into(),
            Feature::Gini => "gini".into(),
        }
    }
}

fn fmt_tau(tau: f64) -> String {
    let pct = tau * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

/// Evaluates a feature on an ascending-sorted population. `None` for a Gini
/// coefficient of a population whose mean is not positive.
pub fn finite_population_feature(sorted: &[f64], feature: &Feature) -> Option<f64> {
    match feature {
        Feature::Percentile { tau } => Some(type1_quantile_sorted(sorted, *tau)),
        Feature::Mean => Some(mean(sorted)),
        Feature::Gini => gini_sorted(sorted),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationFeatureRequest {
    pub features: Vec<Feature>,
    pub population: usize,
    /// Standard error `H` of the population size; `None` treats it as known.
    pub size_se: Option<f64>,
    /// Number of draws to use, spread evenly over all draws; `None` uses all.
    pub draws_used: Option<usize>,
    pub interval_level: f64,
    pub seed: u64,
}

impl Default for PopulationFeatureRequest {
    fn default() -> Self {
        let mut features = Feature::every_fifth_percentile();
        features.push(Feature::Mean);
        features.push(Feature::Gini);
        Self {
            features,
            population: 1000,
            size_se: None,
            draws_used: None,
            interval_level: 0.95,
            seed: 0,
        }
    }
}

impl PopulationFeatureRequest {
    fn validate(&self) -> Result<(), PredictiveError> {
        if self.population == 0 {
            return Err(PredictiveError::Request("population must be >= 1".into()));
        }
        if self.features.is_empty() {
            return Err(PredictiveError::Request("no features requested".into()));
        }
        for f in &self.features {
            if let Feature::Percentile { tau } = f {
                if !(*tau > 0.0 && *tau < 1.0) {
                    return Err(PredictiveError::Request(format!(
                        "percentile level {tau} is outside (0, 1)"
                    )));
                }
            }
        }
        if let Some(h) = self.size_se {
            if !(h.is_finite() && h >= 0.0) {
                return Err(PredictiveError::Request("size SE must be >= 0".into()));
            }
        }
        if self.draws_used == Some(0) {
            return Err(PredictiveError::Request("draws_used must be >= 1".into()));
        }
        if !(self.interval_level > 0.0 && self.interval_level < 1.0) {
            return Err(PredictiveError::Request("interval level must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Posterior mean, median and central interval of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Summary {
    /// Summarises values; order does not matter. Interval ends use linear
    /// interpolation between order statistics.
    pub fn from_values(values: &[f64], level: f64) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let tail = (1.0 - level) / 2.0;
        Some(Self {
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            median: interpolated_quantile_sorted(&sorted, 0.5),
            lower: interpolated_quantile_sorted(&sorted, tail),
            upper: interpolated_quantile_sorted(&sorted, 1.0 - tail),
        })
    }

    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureResult {
    pub feature: Feature,
    /// `None` when the feature was undefined on every draw.
    pub summary: Option<Summary>,
    /// Draws on which the feature was undefined.
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePosterior {
    pub results: Vec<FeatureResult>,
    /// Row per draw, column per feature; `None` where undefined.
    pub per_draw: Vec<Vec<Option<f64>>>,
    /// Draws whose sampled population size was floored at 1.
    pub size_floored: usize,
    pub n_draws: usize,
}

/// `N` independent draws via bin-then-within-bin sampling.
pub fn synthesize_population<R: Rng + ?Sized>(d: &PiecewiseDensity, n: usize, rng: &mut R) -> Vec<f64> {
    d.sample(n, rng)
}

/// A population whose size `η ~ N(N, H²)` is rounded to the nearest integer
/// and floored at 1. `H = 0` consumes no extra randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct SizedPopulation {
    pub values: Vec<f64>,
    pub floored: bool,
}

pub fn size_uncertain_synthesis<R: Rng + ?Sized>(
    d: &PiecewiseDensity,
    n: usize,
    h: f64,
    rng: &mut R,
) -> SizedPopulation {
    let (size, floored) = draw_size(n, h, rng);
    SizedPopulation {
        values: synthesize_population(d, size, rng),
        floored,
    }
}

fn draw_size<R: Rng + ?Sized>(n: usize, h: f64, rng: &mut R) -> (usize, bool) {
    if h == 0.0 {
        return (n, false);
    }
    let e: f64 = rng.sample(StandardNormal);
    let eta = (n as f64 + h * e).round();
    if eta < 1.0 {
        (1, true)
    } else {
        (eta as usize, false)
    }
}

/// Indices of `m` draws spread evenly over `total`.
pub fn select_draws(total: usize, m: Option<usize>) -> Vec<usize> {
    match m {
        Some(m) if m < total => (0..m).map(|i| i * total / m).collect(),
        _ => (0..total).collect(),
    }
}

/// Features for a sequence of densities (one per posterior draw).
pub fn feature_posterior_from_densities(
    densities: &[PiecewiseDensity],
    req: &PopulationFeatureRequest,
) -> Result<FeaturePosterior, PredictiveError> {
    req.validate()?;
    if densities.is_empty() {
        return Err(PredictiveError::Request("no posterior draws".into()));
    }
    let h = req.size_se.unwrap_or(0.0);
    let rows: Vec<(Vec<Option<f64>>, bool)> = densities
        .par_iter()
        .enumerate()
        .map(|(m, d)| {
            let mut rng: ChaCha8Rng = chain_rng(req.seed, m);
            let mut pop = size_uncertain_synthesis(d, req.population, h, &mut rng);
            pop.values.sort_by(f64::total_cmp);
            let row = req
                .features
                .iter()
                .map(|f| finite_population_feature(&pop.values, f))
                .collect();
            (row, pop.floored)
        })
        .collect();
    let size_floored = rows.iter().filter(|r| r.1).count();
    let per_draw: Vec<Vec<Option<f64>>> = rows.into_iter().map(|r| r.0).collect();
    let results = req
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let values: Vec<f64> = per_draw.iter().filter_map(|r| r[j]).collect();
            FeatureResult {
                feature: *f,
                summary: Summary::from_values(&values, req.interval_level),
                n_excluded: per_draw.len() - values.len(),
            }
        })
        .collect();
    Ok(FeaturePosterior {
        results,
        per_draw,
        size_floored,
        n_draws: densities.len(),
    })
}

/// Features for posterior draws of a tract model.
pub fn feature_posterior(
    pd: &PosteriorDraws,
    spec: &ModelSpec,
    req: &PopulationFeatureRequest,
) -> Result<FeaturePosterior, PredictiveError> {
    let all: Vec<&[f64]> = pd.iter_draws().collect();
    let densities = select_draws(all.len(), req.draws_used)
        .into_iter()
        .map(|i| spec.density_at(all[i]))
        .collect::<Result<Vec<_>, _>>()?;
    feature_posterior_from_densities(&densities, req)
}
