//! Tracts nested in a larger area whose microdata follow a weighted mixture
//! of the tract densities.

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelSpec, Unpacked};
use crate::density::PiecewiseDensity;
use crate::sampler::LogDensity;
use crate::stats::log_sum_exp;

/// One microdata record: income `z ≥ 0` and survey weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumsObservation {
    pub z: f64,
    pub weight: f64,
}

/// Tract models plus area microdata. Weights are renormalised to sum to `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NestedParts", into = "NestedParts")]
pub struct NestedSpec {
    tracts: Vec<ModelSpec>,
    mixing: Vec<f64>,
    observations: Vec<PumsObservation>,
    offsets: Vec<usize>,
    /// `bins[r][i]`: the bin of tract `r` containing observation `i`.
    bins: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct NestedParts {
    tracts: Vec<ModelSpec>,
    mixing: Vec<f64>,
    observations: Vec<PumsObservation>,
}

impl TryFrom<NestedParts> for NestedSpec {
    type Error = ModelError;
    fn try_from(p: NestedParts) -> Result<Self, ModelError> {
        NestedSpec::new(p.tracts, p.mixing, p.observations)
    }
}

impl From<NestedSpec> for NestedParts {
    fn from(s: NestedSpec) -> Self {
        NestedParts {
            tracts: s.tracts,
            mixing: s.mixing,
            observations: s.observations,
        }
    }
}

impl NestedSpec {
    /// `mixing` holds tract population shares `o_r` (renormalised here).
    pub fn new(
        tracts: Vec<ModelSpec>,
        mixing: Vec<f64>,
        observations: Vec<PumsObservation>,
    ) -> Result<Self, ModelError> {
        if tracts.is_empty() {
            return Err(ModelError::Spec("nested model needs at least one tract".into()));
        }
        if mixing.len() != tracts.len() {
            return Err(ModelError::Spec(format!(
                "{} mixing weights for {} tracts",
                mixing.len(),
                tracts.len()
            )));
        }
        if mixing.iter().any(|o| !(o.is_finite() && *o > 0.0)) {
            return Err(ModelError::Spec("mixing weights must be positive".into()));
        }
        let os: f64 = mixing.iter().sum();
        let mixing: Vec<f64> = mixing.iter().map(|o| o / os).collect();
        for ob in &observations {
            if !(ob.z.is_finite() && ob.z >= 0.0) {
                return Err(ModelError::Spec(format!("income {} must be >= 0", ob.z)));
            }
            if !(ob.weight.is_finite() && ob.weight > 0.0) {
                return Err(ModelError::Spec(format!("weight {} must be > 0", ob.weight)));
            }
        }
        let n = observations.len() as f64;
        let ws: f64 = observations.iter().map(|o| o.weight).sum();
        let observations: Vec<PumsObservation> = observations
            .into_iter()
            .map(|o| PumsObservation {
                z: o.z,
                weight: o.weight * n / ws,
            })
            .collect();
        let mut offsets = Vec::with_capacity(tracts.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for t in &tracts {
            acc += t.dim();
            offsets.push(acc);
        }
        let mut bins = Vec::with_capacity(tracts.len());
        for t in &tracts {
            let idx = observations
                .iter()
                .map(|o| {
                    if o.z <= t.knots().first() {
                        Ok(0)
                    } else {
                        t.knots().bin_of(o.z).ok_or_else(|| {
                            ModelError::Spec(format!("income {} outside tract support", o.z))
                        })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            bins.push(idx);
        }
        Ok(Self {
            tracts,
            mixing,
            observations,
            offsets,
            bins,
        })
    }

    pub fn tracts(&self) -> &[ModelSpec] {
        &self.tracts
    }

    /// Normalised mixing weights `o_r`.
    pub fn mixing(&self) -> &[f64] {
        &self.mixing
    }

    /// Observations with weights normalised to sum to `n`.
    pub fn observations(&self) -> &[PumsObservation] {
        &self.observations
    }

    /// Slice of the flat parameter vector belonging to tract `r`.
    pub fn range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().expect("offsets non-empty")
    }

    /// Per-tract densities at a flat unconstrained point.
    pub fn densities_at(&self, theta: &[f64]) -> Result<Vec<PiecewiseDensity>, ModelError> {
        self.tracts
            .iter()
            .enumerate()
            .map(|(r, t)| t.density_at(&theta[self.range(r)]))
            .collect()
    }

    /// Sum of tract log posteriors plus the mixture term, with gradient.
    pub fn log_posterior_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let n_tracts = self.tracts.len();
        let mut us: Vec<Unpacked> = vec![Unpacked::default(); n_tracts];
        let mut gps: Vec<Vec<f64>> = Vec::with_capacity(n_tracts);
        let mut gas: Vec<Vec<f64>> = Vec::with_capacity(n_tracts);
        let mut total = 0.0;
        for (r, t) in self.tracts.iter().enumerate() {
            t.unpack(&theta[self.range(r)], &mut us[r]);
            let mut gp = vec![0.0; t.n_bins()];
            let mut ga = vec![0.0; t.n_bins()];
            total += t.accumulate(&us[r], &mut gp, &mut ga) + us[r].log_jacobian;
            gps.push(gp);
            gas.push(ga);
        }
        let ln_o: Vec<f64> = self.mixing.iter().map(|o| o.ln()).collect();
        let mut terms = vec![0.0; n_tracts];
        let mut d_alpha = vec![0.0; n_tracts];
        for (i, ob) in self.observations.iter().enumerate() {
            for r in 0..n_tracts {
                let k = self.bins[r][i];
                let p = us[r].stick.probs[k];
                let shape = self.tracts[r].shape(k, us[r].alphas[k]);
                let (lf, dlf) = shape.log_pdf_inside_with_alpha_grad(ob.z.max(shape.lower));
                d_alpha[r] = dlf;
                terms[r] = ob.weight * (ln_o[r] + p.ln() + lf);
            }
            let lse = log_sum_exp(&terms);
            total += lse;
            for r in 0..n_tracts {
                let gamma = (terms[r] - lse).exp();
                if gamma == 0.0 {
                    continue;
                }
                let k = self.bins[r][i];
                gps[r][k] += gamma * ob.weight / us[r].stick.probs[k];
                gas[r][k] += gamma * ob.weight * d_alpha[r];
            }
        }
        for (r, t) in self.tracts.iter().enumerate() {
            t.chain(&us[r], &gps[r], &gas[r], &mut grad[self.range(r)], true);
        }
        total
    }

    /// The mixture term alone, `Σ_i log Σ_r exp(w_i (log o_r + log π_r(z_i)))`.
    pub fn mixture_log_likelihood(&self, densities: &[PiecewiseDensity]) -> f64 {
        let ln_o: Vec<f64> = self.mixing.iter().map(|o| o.ln()).collect();
        let mut terms = vec![0.0; densities.len()];
        self.observations
            .iter()
            .map(|ob| {
                for (r, d) in densities.iter().enumerate() {
                    terms[r] = ob.weight * (ln_o[r] + ln_pdf_closed(d, ob.z));
                }
                log_sum_exp(&terms)
            })
            .sum()
    }
}

/// Log density where `z` at the lowest knot counts as inside the first bin.
fn ln_pdf_closed(d: &PiecewiseDensity, z: f64) -> f64 {
    let first = d.knots().first();
    if z <= first {
        let shape = d.bin(0);
        d.probs()[0].ln() + shape.log_pdf_inside_with_alpha_grad(first).0
    } else {
        d.ln_pdf(z)
    }
}

impl LogDensity for NestedSpec {
    fn dim(&self) -> usize {
        NestedSpec::dim(self)
    }

    fn log_density_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.log_posterior_and_gradient(theta, grad)
    }
}

/// Posterior probability that a record with income `z` and weight `w`
/// belongs to each tract: `o_r^w π_r(z)^w`, normalised. Falls back to the
/// normalised `o_r^w` when every tract has zero density at `z`.
pub fn tract_membership_posterior(
    densities: &[PiecewiseDensity],
    mixing: &[f64],
    z: f64,
    w: f64,
) -> Vec<f64> {
    let mut terms: Vec<f64> = densities
        .iter()
        .zip(mixing)
        .map(|(d, o)| w * (o.ln() + ln_pdf_closed(d, z)))
        .collect();
    let mut lse = log_sum_exp(&terms);
    if lse == f64::NEG_INFINITY {
        terms = mixing.iter().map(|o| w * o.ln()).collect();
        lse = log_sum_exp(&terms);
    }
    terms.iter().map(|t| (t - lse).exp()).collect()
}
