//! The Pareto-linear baseline: bin estimates used directly as bin
//! probabilities, uniform bins through the median, Pareto shapes from tail
//! ratios above it, and logged fallbacks where a shape is unusable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{BinFamily, DensityError, KnotVector, PiecewiseDensity, Upper};
use crate::functionals::EstimateRecord;
use crate::model::{knots_from_bins, ModelError};
use crate::posterior_predictive::{finite_population_feature, Feature};

/// Population size and seed used to compute the Gini coefficient of a fit.
pub const GINI_POPULATION: usize = 100_000;
pub const GINI_SEED: u64 = 0x5052_4c4e;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrlnError {
    #[error("all bin estimates are zero")]
    Degenerate,
    #[error("at least two bins are required")]
    TooFewBins,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackRule {
    /// Interior bin with an unusable shape estimate made uniform.
    InteriorUniform,
    /// Top bin with an unusable shape estimate made a point mass at its lower knot.
    TopPointMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FallbackEvent {
    pub bin: usize,
    pub rule: FallbackRule,
    /// The rejected shape estimate; `None` when it was undefined.
    pub alpha_hat: Option<f64>,
}

/// A fitted PRLN distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum PrlnDensity {
    Continuous { density: PiecewiseDensity },
    /// A continuous body below the top knot plus an atom at it. `body` is
    /// `None` when all mass sits in the atom.
    TopAtom {
        body: Option<PiecewiseDensity>,
        atom_at: f64,
        atom_mass: f64,
    },
}

impl PrlnDensity {
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            PrlnDensity::Continuous { density } => density.cdf(x),
            PrlnDensity::TopAtom {
                body,
                atom_at,
                atom_mass,
            } => {
                if x >= *atom_at {
                    1.0
                } else {
                    body.as_ref().map_or(0.0, |b| (1.0 - atom_mass) * b.cdf(x))
                }
            }
        }
    }

    /// Left-continuous quantile, `τ ∈ (0, 1)`.
    pub fn quantile(&self, tau: f64) -> Result<f64, DensityError> {
        match self {
            PrlnDensity::Continuous { density } => density.quantile(tau),
            PrlnDensity::TopAtom {
                body,
                atom_at,
                atom_mass,
            } => {
                let body_mass = 1.0 - atom_mass;
                match body {
                    Some(b) if tau <= body_mass => b.quantile((tau / body_mass).min(1.0)),
                    _ => Ok(*atom_at),
                }
            }
        }
    }

    pub fn mean(&self) -> Result<f64, DensityError> {
        match self {
            PrlnDensity::Continuous { density } => density.mean(),
            PrlnDensity::TopAtom {
                body,
                atom_at,
                atom_mass,
            } => {
                let body_part = match body {
                    Some(b) => (1.0 - atom_mass) * b.mean()?,
                    None => 0.0,
                };
                Ok(body_part + atom_mass * atom_at)
            }
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            PrlnDensity::Continuous { density } => density.sample_one(rng),
            PrlnDensity::TopAtom {
                body,
                atom_at,
                atom_mass,
            } => {
                let u: f64 = rng.random();
                match body {
                    Some(b) if u >= *atom_mass => b.sample_one(rng),
                    _ => *atom_at,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrlnFit {
    pub density: PrlnDensity,
    pub knots: KnotVector,
    /// Renormalised bin estimates.
    pub probs: Vec<f64>,
    /// Shape estimate per bin, after fallbacks; `None` for uniform bins and the atom.
    pub alphas: Vec<Option<f64>>,
    pub median_bin: usize,
    pub fallbacks: Vec<FallbackEvent>,
}

/// Tail-ratio shape estimate for the boundary pair `(κ_k, κ_{k+1})`.
fn tail_ratio_alpha(tails: &[f64], knots: &[f64], k: usize) -> Option<f64> {
    let (t0, t1) = (tails[k], tails[k + 1]);
    let (a, b) = (knots[k], knots[k + 1]);
    if !(t0 > 0.0 && t1 > 0.0 && a > 0.0) {
        return None;
    }
    let alpha = (t0 / t1).ln() / (b / a).ln();
    alpha.is_finite().then_some(alpha)
}

/// Fits PRLN to bin records. With no hint, the median bin is where the
/// linearly interpolated bin CDF crosses one half.
pub fn prln_fit(bins: &[EstimateRecord], median_hint: Option<f64>) -> Result<PrlnFit, PrlnError> {
    let (sorted, knots) = knots_from_bins(bins)?;
    let k = knots.n_bins();
    if k < 2 {
        return Err(PrlnError::TooFewBins);
    }
    let raw: Vec<f64> = sorted.iter().map(|r| r.value.max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(PrlnError::Degenerate);
    }
    let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let mut tails = vec![0.0; k + 1];
    for j in (0..k).rev() {
        tails[j] = tails[j + 1] + probs[j];
    }
    let median_bin = match median_hint {
        Some(m) if m <= knots.first() => 0,
        Some(m) => knots.bin_of(m).unwrap_or(k - 1),
        None => {
            let mut cum = 0.0;
            let mut found = k - 1;
            for (j, p) in probs.iter().enumerate() {
                if cum + p >= 0.5 && *p > 0.0 {
                    found = j;
                    break;
                }
                cum += p;
            }
            found
        }
    };
    let finite = knots.finite_knots();
    let mut families = Vec::with_capacity(k);
    let mut alphas = vec![None; k];
    let mut fallbacks = Vec::new();
    for j in 0..k - 1 {
        if j <= median_bin {
            families.push(BinFamily::Uniform);
            continue;
        }
        match tail_ratio_alpha(&tails, finite, j) {
            Some(a) if a > 1.0 => {
                families.push(BinFamily::TruncatedPareto { alpha: a });
                alphas[j] = Some(a);
            }
            other => {
                families.push(BinFamily::Uniform);
                fallbacks.push(FallbackEvent {
                    bin: j,
                    rule: FallbackRule::InteriorUniform,
                    alpha_hat: other,
                });
            }
        }
    }
    let top_alpha = tail_ratio_alpha(&tails, finite, k - 2);
    let density = match top_alpha {
        Some(a) if a > 1.0 => {
            families.push(BinFamily::UnboundedPareto { alpha: a });
            alphas[k - 1] = Some(a);
            PrlnDensity::Continuous {
                density: PiecewiseDensity::new(knots.clone(), probs.clone(), families)?,
            }
        }
        other => {
            fallbacks.push(FallbackEvent {
                bin: k - 1,
                rule: FallbackRule::TopPointMass,
                alpha_hat: other,
            });
            let atom_mass = probs[k - 1];
            let body_mass = 1.0 - atom_mass;
            let body = if body_mass > 0.0 {
                let body_knots = KnotVector::new(finite.to_vec(), false)?;
                let body_probs = probs[..k - 1].iter().map(|p| p / body_mass).collect();
                Some(PiecewiseDensity::new(body_knots, body_probs, families)?)
            } else {
                None
            };
            PrlnDensity::TopAtom {
                body,
                atom_at: finite[k - 1],
                atom_mass,
            }
        }
    };
    Ok(PrlnFit {
        density,
        knots,
        probs,
        alphas,
        median_bin,
        fallbacks,
    })
}

/// Population of `n` draws from the fit with a fixed seed, sorted.
pub fn prln_population(fit: &PrlnFit, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pop: Vec<f64> = (0..n).map(|_| fit.density.sample_one(&mut rng)).collect();
    pop.sort_by(f64::total_cmp);
    pop
}

/// Point estimates; `None` where a feature is undefined.
pub fn prln_features(fit: &PrlnFit, features: &[Feature]) -> Vec<(Feature, Option<f64>)> {
    let mut gini_pop: Option<Vec<f64>> = None;
    features
        .iter()
        .map(|f| {
            let v = match f {
                Feature::Percentile { tau } => fit.density.quantile(*tau).ok(),
                Feature::Mean => fit.density.mean().ok(),
                Feature::Gini => {
                    let pop = gini_pop
                        .get_or_insert_with(|| prln_population(fit, GINI_POPULATION, GINI_SEED));
                    finite_population_feature(pop, f)
                }
            };
            (*f, v)
        })
        .collect()
}

impl PrlnFit {
    pub fn top_knot(&self) -> f64 {
        match self.knots.upper(self.knots.n_bins() - 2) {
            Upper::Finite(v) => v,
            Upper::Infinite => f64::INFINITY,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bins_from(knots: &[f64], probs: &[f64]) -> Vec<EstimateRecord> {
        let mut edges = knots.to_vec();
        edges.push(f64::INFINITY);
        probs
            .iter()
            .enumerate()
            .map(|(i, p)| EstimateRecord::bin(edges[i], edges[i + 1], *p, 0.01).unwrap())
            .collect()
    }

    #[test]
    fn exact_pareto_tail_is_recovered() {
        // 50% below 50k, a Pareto(α = 2) tail above
        let knots = [0.0, 25000.0, 50000.0, 75000.0, 100000.0];
        let s = |x: f64| 0.5 * (50000.0 / x).powi(2);
        let probs = [
            0.25,
            0.25,
            s(50000.0) - s(75000.0),
            s(75000.0) - s(100000.0),
            s(100000.0),
        ];
        let fit = prln_fit(&bins_from(&knots, &probs), Some(30000.0)).unwrap();
        assert!(fit.fallbacks.is_empty());
        for a in fit.alphas.iter().flatten() {
            assert!((a - 2.0).abs() < 1e-10, "{a}");
        }
        assert_eq!(fit.alphas.iter().flatten().count(), 3);
        // exact PRLN-consistent data reproduce p
        for (p, q) in fit.probs.iter().zip(probs) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn undefined_interior_ratio_falls_back_to_uniform() {
        let knots = [0.0, 10.0, 20.0, 30.0];
        let fit = prln_fit(&bins_from(&knots, &[0.6, 0.4, 0.0, 0.0]), None).unwrap();
        assert_eq!(fit.median_bin, 0);
        assert_eq!(
            fit.fallbacks[0],
            FallbackEvent {
                bin: 1,
                rule: FallbackRule::InteriorUniform,
                alpha_hat: None
            }
        );
        let fit = prln_fit(&bins_from(&knots, &[0.7, 0.2, 0.1, 0.0]), Some(5.0)).unwrap();
        assert_eq!(
            fit.fallbacks[0],
            FallbackEvent {
                bin: 2,
                rule: FallbackRule::InteriorUniform,
                alpha_hat: None
            }
        );
    }

    #[test]
    fn top_point_mass_pins_high_percentiles() {
        // tail ratio T = 0.07 / 0.06 over (150k, 200k): α̂ ≈ 0.54
        let knots = [0.0, 50000.0, 100000.0, 150000.0, 200000.0];
        let probs = [0.4, 0.35, 0.18, 0.01, 0.06];
        let fit = prln_fit(&bins_from(&knots, &probs), None).unwrap();
        let last = fit.fallbacks.last().unwrap();
        assert_eq!(last.rule, FallbackRule::TopPointMass);
        assert!(last.alpha_hat.unwrap() <= 1.0);
        assert_eq!(fit.density.quantile(0.95).unwrap(), 200000.0);
        for tau in [0.95, 0.97, 0.999] {
            assert_eq!(fit.density.quantile(tau).unwrap(), 200000.0);
        }
        assert!(fit.density.quantile(0.93).unwrap() < 200000.0);
        assert!(fit.density.mean().unwrap().is_finite());
    }

    #[test]
    fn single_uniform_percentiles() {
        let fit = PrlnFit {
            density: PrlnDensity::Continuous {
                density: PiecewiseDensity::uniform_bins(&[0.0, 1.0], vec![1.0]).unwrap(),
            },
            knots: KnotVector::new(vec![0.0, 1.0], false).unwrap(),
            probs: vec![1.0],
            alphas: vec![None],
            median_bin: 0,
            fallbacks: vec![],
        };
        for tau in [0.1, 0.5, 0.9] {
            assert!((fit.density.quantile(tau).unwrap() - tau).abs() < 1e-15);
        }
    }

    #[test]
    fn atom_quantiles() {
        let body = PiecewiseDensity::uniform_bins(&[0.0, 10.0], vec![1.0]).unwrap();
        let d = PrlnDensity::TopAtom {
            body: Some(body),
            atom_at: 10.0,
            atom_mass: 0.1,
        };
        for tau in [0.901, 0.95, 0.9999] {
            assert_eq!(d.quantile(tau).unwrap(), 10.0);
        }
        assert!((d.quantile(0.45).unwrap() - 5.0).abs() < 1e-12);
        assert!((d.cdf(5.0) - 0.45).abs() < 1e-12);
        assert_eq!(d.cdf(10.0), 1.0);
    }

    #[test]
    fn gini_uses_the_shared_population_formula() {
        let knots = [0.0, 50000.0, 100000.0, 150000.0, 200000.0];
        let fit = prln_fit(&bins_from(&knots, &[0.4, 0.3, 0.15, 0.1, 0.05]), None).unwrap();
        let got = prln_features(&fit, &[Feature::Gini])[0].1.unwrap();
        let pop = prln_population(&fit, GINI_POPULATION, GINI_SEED);
        let n = pop.len() as f64;
        let total: f64 = pop.iter().sum();
        // Σ_i Σ_j |y_i - y_j| = 2 Σ_i (2i - n - 1) y_(i) for sorted y
        let pairwise: f64 = pop
            .iter()
            .enumerate()
            .map(|(i, y)| 2.0 * (2.0 * (i + 1) as f64 - n - 1.0) * y)
            .sum();
        let expected = pairwise / (2.0 * n * total);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn percentiles_are_monotone() {
        let knots = [0.0, 50000.0, 100000.0, 150000.0, 200000.0];
        for probs in [[0.4, 0.3, 0.15, 0.1, 0.05], [0.4, 0.35, 0.18, 0.01, 0.06]] {
            let fit = prln_fit(&bins_from(&knots, &probs), None).unwrap();
            let taus: Vec<Feature> = (1..100)
                .map(|i| Feature::Percentile {
                    tau: i as f64 / 100.0,
                })
                .collect();
            let vals: Vec<f64> = prln_features(&fit, &taus).iter().map(|v| v.1.unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn merging_top_bins_never_adds_the_point_mass() {
        let knots = [0.0, 50000.0, 100000.0, 150000.0, 200000.0];
        let merged_knots = [0.0, 50000.0, 100000.0, 150000.0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let mut p: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let full = prln_fit(&bins_from(&knots, &p), None).unwrap();
            let merged_p = [p[0], p[1], p[2], p[3] + p[4]];
            let merged = prln_fit(&bins_from(&merged_knots, &merged_p), None).unwrap();
            let atom = |f: &PrlnFit| matches!(f.density, PrlnDensity::TopAtom { .. });
            // the merged top shape is the unmerged shape of bin 2, so a fit
            // without fallbacks on that pair cannot gain the atom
            if full.fallbacks.is_empty() && full.median_bin < 2 {
                assert!(!atom(&merged), "{p:?}");
            }
        }
    }

    #[test]
    fn all_zero_bins_are_rejected() {
        let knots = [0.0, 10.0];
        assert_eq!(
            prln_fit(&bins_from(&knots, &[0.0, 0.0]), None).unwrap_err(),
            PrlnError::Degenerate
        );
    }
}
