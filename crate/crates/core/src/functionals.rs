//! Published estimates as functionals of the latent density, and the Gaussian
//! data model that links them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{DensityError, KnotVector, PiecewiseDensity, Upper};
use crate::stats::normal_ln_pdf;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunctionalError {
    #[error("invalid estimate record: {0}")]
    InvalidRecord(String),
    #[error("bin estimate containing the quantile is zero; widen or drop the record")]
    DegeneratePlugIn,
    #[error("the bin-width approximation needs a finite bin, but {q} lies in the unbounded bin")]
    UnsupportedApproximation { q: f64 },
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// What a published estimate measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimateKind {
    BinProportion { lower: f64, upper: Upper },
    Mean,
    Quantile { tau: f64 },
}

/// One published estimate `q_u` with standard error `S_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub kind: EstimateKind,
    pub value: f64,
    pub se: f64,
}

impl EstimateRecord {
    pub fn new(kind: EstimateKind, value: f64, se: f64) -> Result<Self, FunctionalError> {
        if !value.is_finite() {
            return Err(FunctionalError::InvalidRecord(format!(
                "estimate value must be finite, got {value}"
            )));
        }
        if !(se.is_finite() && se > 0.0) {
            return Err(FunctionalError::InvalidRecord(format!(
                "standard error must be positive, got {se}"
            )));
        }
        match kind {
            EstimateKind::BinProportion { lower, upper } => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(FunctionalError::InvalidRecord(format!(
                        "bin proportion must be in [0, 1], got {value}"
                    )));
                }
                if let Upper::Finite(u) = upper {
                    if !(u > lower) {
                        return Err(FunctionalError::InvalidRecord(format!(
                            "bin bounds must satisfy lower < upper, got ({lower}, {u})"
                        )));
                    }
                }
            }
            EstimateKind::Quantile { tau } => {
                if !(tau > 0.0 && tau < 1.0) {
                    return Err(FunctionalError::InvalidRecord(format!(
                        "quantile level must be in (0, 1), got {tau}"
                    )));
                }
            }
            EstimateKind::Mean => {}
        }
        Ok(Self { kind, value, se })
    }

    pub fn bin(lower: f64, upper: f64, value: f64, se: f64) -> Result<Self, FunctionalError> {
        Self::new(
            EstimateKind::BinProportion {
                lower,
                upper: Upper::from_f64(upper),
            },
            value,
            se,
        )
    }

    pub fn mean(value: f64, se: f64) -> Result<Self, FunctionalError> {
        Self::new(EstimateKind::Mean, value, se)
    }

    pub fn quantile(tau: f64, value: f64, se: f64) -> Result<Self, FunctionalError> {
        Self::new(EstimateKind::Quantile { tau }, value, se)
    }
}

/// `Q_u(π)`.
pub fn evaluate_functional(d: &PiecewiseDensity, kind: &EstimateKind) -> Result<f64, DensityError> {
    match *kind {
        EstimateKind::BinProportion { lower, upper } => d.bin_mass(lower, upper.to_f64()),
        EstimateKind::Mean => d.mean(),
        EstimateKind::Quantile { tau } => d.quantile(tau),
    }
}

/// Gaussian log-density of the published value at `Q_u(π)`.
///
/// Quantile records are evaluated with the quantile function, which is not
/// smooth in the bin probabilities; fitting uses [`invert_quantile`] instead.
pub fn loglik_record(d: &PiecewiseDensity, rec: &EstimateRecord) -> Result<f64, DensityError> {
    let q = evaluate_functional(d, &rec.kind)?;
    Ok(normal_ln_pdf(rec.value, q, rec.se))
}

/// A quantile estimate recast as an observation of the CDF at the published
/// value: `τ ~ N(Π(q), effective_sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvertedQuantileDatum {
    pub tau: f64,
    pub q: f64,
    pub effective_sd: f64,
}

/// Which plug-in density estimate supplies `π(q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlugIn {
    /// `b_{k*} / (κ_{k*+1} - κ_{k*})`, exact when the containing bin is uniform.
    #[default]
    UniformBin,
    /// `b_{k*} / (B_{k*+1} - B_{k*})` applied to any finite bin.
    BinWidth,
}

/// How the plug-in density scales the quantile's standard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionScale {
    /// `S / π̂(q)`, the form the published data model writes down.
    #[default]
    Literal,
    /// `S · π̂(q)`, the first-order delta-method scale on the probability axis.
    DeltaMethod,
}

/// Containing bin, its estimate `b_{k*}` and its width for a quantile estimate.
fn plug_in_parts(
    q: f64,
    bin_estimates: &[f64],
    knots: &KnotVector,
) -> Result<(usize, f64, f64), FunctionalError> {
    if bin_estimates.len() != knots.n_bins() {
        return Err(FunctionalError::InvalidRecord(format!(
            "{} bin estimates for {} bins",
            bin_estimates.len(),
            knots.n_bins()
        )));
    }
    let k = knots.bin_of(q).ok_or_else(|| {
        FunctionalError::InvalidRecord(format!("quantile estimate {q} lies outside the knots"))
    })?;
    let width = match knots.upper(k) {
        Upper::Finite(b) => b - knots.lower(k),
        Upper::Infinite => return Err(FunctionalError::UnsupportedApproximation { q }),
    };
    let b = bin_estimates[k];
    if !(b > 0.0) {
        return Err(FunctionalError::DegeneratePlugIn);
    }
    Ok((k, b, width))
}

/// Plug-in density `π̂(q) = b_{k*} / width` with the index of the containing bin.
pub fn plug_in_density(
    q: f64,
    bin_estimates: &[f64],
    knots: &KnotVector,
) -> Result<(usize, f64), FunctionalError> {
    let (k, b, width) = plug_in_parts(q, bin_estimates, knots)?;
    Ok((k, b / width))
}

/// Converts a quantile record into an [`InvertedQuantileDatum`] using a
/// plug-in estimate of the density at the published quantile.
pub fn invert_quantile(
    rec: &EstimateRecord,
    bin_estimates: &[f64],
    knots: &KnotVector,
    plug_in: PlugIn,
    scale: InversionScale,
) -> Result<InvertedQuantileDatum, FunctionalError> {
    let tau = match rec.kind {
        EstimateKind::Quantile { tau } => tau,
        _ => {
            return Err(FunctionalError::InvalidRecord(
                "only quantile records can be inverted".into(),
            ))
        }
    };
    let (_, b, width) = match (plug_in, plug_in_parts(rec.value, bin_estimates, knots)) {
        (PlugIn::UniformBin, Err(FunctionalError::UnsupportedApproximation { q })) => {
            return Err(FunctionalError::InvalidRecord(format!(
                "quantile estimate {q} lies in the unbounded bin, which is never uniform"
            )))
        }
        (_, r) => r?,
    };
    let effective_sd = match scale {
        InversionScale::Literal => rec.se * width / b,
        InversionScale::DeltaMethod => rec.se * b / width,
    };
    Ok(InvertedQuantileDatum {
        tau,
        q: rec.value,
        effective_sd,
    })
}

/// Gaussian log-density of `τ` at `Π(q)`; smooth in the bin probabilities.
pub fn loglik_inverted_quantile(d: &PiecewiseDensity, datum: &InvertedQuantileDatum) -> f64 {
    normal_ln_pdf(datum.tau, d.cdf(datum.q), datum.effective_sd)
}

/// A functional's value and its partial derivatives with respect to each bin
/// probability and each bin's Pareto shape (zero for uniform bins).
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalGradient {
    pub value: f64,
    pub d_probs: Vec<f64>,
    pub d_alpha: Vec<f64>,
}

impl FunctionalGradient {
    fn zeros(k: usize, value: f64) -> Self {
        Self {
            value,
            d_probs: vec![0.0; k],
            d_alpha: vec![0.0; k],
        }
    }
}

/// `Π(x)` with derivatives.
pub fn cdf_with_grad(d: &PiecewiseDensity, x: f64) -> FunctionalGradient {
    let k = d.n_bins();
    if x <= d.knots().first() {
        return FunctionalGradient::zeros(k, 0.0);
    }
    match d.knots().bin_of(x) {
        None => {
            let mut g = FunctionalGradient::zeros(k, 1.0);
            g.d_probs.fill(1.0);
            g
        }
        Some(j) => {
            let bin = d.bin(j);
            let f = bin.cdf_inside(x);
            let mut g = FunctionalGradient::zeros(k, d.cumulative()[j] + d.probs()[j] * f);
            g.d_probs[..j].fill(1.0);
            g.d_probs[j] = f;
            g.d_alpha[j] = d.probs()[j] * bin.cdf_alpha_grad(x);
            g
        }
    }
}

/// `Π(b) - Π(a)` with derivatives; `b` may be infinite.
pub fn bin_mass_with_grad(d: &PiecewiseDensity, a: f64, b: Upper) -> FunctionalGradient {
    let lo = cdf_with_grad(d, a);
    let hi = match b {
        Upper::Finite(v) => cdf_with_grad(d, v),
        Upper::Infinite => {
            let mut g = FunctionalGradient::zeros(d.n_bins(), 1.0);
            g.d_probs.fill(1.0);
            g
        }
    };
    FunctionalGradient {
        value: hi.value - lo.value,
        d_probs: hi.d_probs.iter().zip(&lo.d_probs).map(|(h, l)| h - l).collect(),
        d_alpha: hi.d_alpha.iter().zip(&lo.d_alpha).map(|(h, l)| h - l).collect(),
    }
}

/// `μ = Σ p_k μ_k` with derivatives.
pub fn mean_with_grad(d: &PiecewiseDensity) -> Result<FunctionalGradient, DensityError> {
    let k = d.n_bins();
    let mut g = FunctionalGradient::zeros(k, 0.0);
    for j in 0..k {
        let bin = d.bin(j);
        let p = d.probs()[j];
        if p == 0.0 {
            // the bin mean still enters the derivative in p_j
            g.d_probs[j] = bin.mean().unwrap_or(0.0);
            continue;
        }
        let mu = bin.mean()?;
        g.value += p * mu;
        g.d_probs[j] = mu;
        g.d_alpha[j] = p * bin.mean_alpha_grad();
    }
    Ok(g)
}

/// Functional value with derivatives for the smooth estimate kinds.
/// Quantile kinds have no smooth form and are rejected.
pub fn functional_with_grad(
    d: &PiecewiseDensity,
    kind: &EstimateKind,
) -> Result<FunctionalGradient, FunctionalError> {
    match *kind {
        EstimateKind::BinProportion { lower, upper } => Ok(bin_mass_with_grad(d, lower, upper)),
        EstimateKind::Mean => Ok(mean_with_grad(d)?),
        EstimateKind::Quantile { .. } => Err(FunctionalError::InvalidRecord(
            "quantile records must be inverted before gradient-based fitting".into(),
        )),
    }
}
