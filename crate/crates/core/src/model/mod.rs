//! Tract-level Bayesian model: knots from the published bins, uniform bins up
//! to the median and Pareto bins above, Dirichlet and truncated-normal priors,
//! and a log-posterior with an exact gradient on the unconstrained scale.

mod nested;
mod transform;

pub use nested::{tract_membership_posterior, NestedSpec, PumsObservation};
pub use transform::{
    alpha_from_shift, shift_from_alpha, stick_from_probs, ParameterVector,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{BinFamily, BinShape, DensityError, KnotVector, PiecewiseDensity, Upper};
use crate::functionals::{
    invert_quantile, EstimateKind, EstimateRecord, FunctionalError, InvertedQuantileDatum,
    InversionScale, PlugIn,
};
use crate::sampler::LogDensity;
use crate::stats::{ln_gamma, normal_cdf, normal_ln_pdf};
use transform::StickState;

/// Floor applied to zero prior-centre entries before renormalising.
pub const PRIOR_CENTER_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bin records do not form a contiguous cover of [0, inf): {0}")]
    Schema(String),
    #[error("invalid model specification: {0}")]
    Spec(String),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Whether a bin is modelled as uniform or Pareto. Pareto bins are truncated
/// unless their upper knot is infinite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinRole {
    Uniform,
    Pareto,
}

/// `α ~ N(location, scale²)` truncated to `α > lower`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPrior {
    pub location: f64,
    pub scale: f64,
    pub lower: f64,
}

impl Default for AlphaPrior {
    fn default() -> Self {
        Self {
            location: 2.0,
            scale: 1.0,
            lower: 1.0,
        }
    }
}

impl AlphaPrior {
    pub fn ln_pdf(&self, alpha: f64) -> f64 {
        if alpha <= self.lower {
            return f64::NEG_INFINITY;
        }
        let tail = 1.0 - normal_cdf((self.lower - self.location) / self.scale);
        normal_ln_pdf(alpha, self.location, self.scale) - tail.ln()
    }

    fn d_ln_pdf(&self, alpha: f64) -> f64 {
        -(alpha - self.location) / (self.scale * self.scale)
    }
}

/// Prior settings: Dirichlet centre `g` and scale `t`, plus the shape prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSettings {
    pub center: Vec<f64>,
    pub scale: f64,
    #[serde(default)]
    pub alpha: AlphaPrior,
}

impl PriorSettings {
    pub fn new(center: Vec<f64>, scale: f64) -> Self {
        Self {
            center,
            scale,
            alpha: AlphaPrior::default(),
        }
    }

    /// Floors zero entries at [`PRIOR_CENTER_FLOOR`] and renormalises.
    fn normalized_center(&self, k: usize) -> Result<Vec<f64>, ModelError> {
        if self.center.len() != k {
            return Err(ModelError::Spec(format!(
                "prior centre has {} entries for {k} bins",
                self.center.len()
            )));
        }
        if self.center.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ModelError::Spec("prior centre entries must be >= 0".into()));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(ModelError::Spec(format!(
                "prior scale must be positive, got {}",
                self.scale
            )));
        }
        let floored: Vec<f64> = self.center.iter().map(|v| v.max(PRIOR_CENTER_FLOOR)).collect();
        let s: f64 = floored.iter().sum();
        Ok(floored.into_iter().map(|v| v / s).collect())
    }
}

/// Options for turning the median into an inverted-quantile datum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MedianOptions {
    #[serde(default)]
    pub plug_in: PlugIn,
    #[serde(default)]
    pub scale: InversionScale,
}

/// A likelihood term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "datum", rename_all = "snake_case")]
pub enum ModelDatum {
    /// A bin or mean estimate entering through `N(Q_u(π), S_u²)`.
    Estimate(EstimateRecord),
    /// A quantile estimate entering through `N(Π(q), sd²)`.
    InvertedQuantile(InvertedQuantileDatum),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum DatumPlan {
    KnotBin(usize),
    Range(f64, Upper),
    Mean,
    Cdf(f64),
}

/// Published estimates for one area.
#[derive(Debug, Clone, PartialEq)]
pub struct TractEstimates {
    pub bins: Vec<EstimateRecord>,
    pub mean: Option<EstimateRecord>,
    pub median: EstimateRecord,
}

/// A fully assembled tract model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecParts", into = "SpecParts")]
pub struct ModelSpec {
    knots: KnotVector,
    roles: Vec<BinRole>,
    data: Vec<ModelDatum>,
    prior: PriorSettings,
    /// Normalised Dirichlet centre.
    center: Vec<f64>,
    median_bin: usize,
    plans: Vec<DatumPlan>,
    dirichlet_const: f64,
    pareto_bins: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SpecParts {
    knots: KnotVector,
    roles: Vec<BinRole>,
    data: Vec<ModelDatum>,
    prior: PriorSettings,
    median_bin: usize,
}

impl TryFrom<SpecParts> for ModelSpec {
    type Error = ModelError;
    fn try_from(p: SpecParts) -> Result<Self, ModelError> {
        ModelSpec::new(p.knots, p.roles, p.data, p.prior, p.median_bin)
    }
}

impl From<ModelSpec> for SpecParts {
    fn from(s: ModelSpec) -> Self {
        SpecParts {
            knots: s.knots,
            roles: s.roles,
            data: s.data,
            prior: s.prior,
            median_bin: s.median_bin,
        }
    }
}

/// Checks that bin records tile `[0, inf)` and returns them sorted with the knots.
pub fn knots_from_bins(bins: &[EstimateRecord]) -> Result<(Vec<EstimateRecord>, KnotVector), ModelError> {
    if bins.is_empty() {
        return Err(ModelError::Schema("no bin records".into()));
    }
    let mut sorted: Vec<(f64, Upper, EstimateRecord)> = Vec::with_capacity(bins.len());
    for b in bins {
        match b.kind {
            EstimateKind::BinProportion { lower, upper } => sorted.push((lower, upper, *b)),
            _ => return Err(ModelError::Schema("non-bin record among bins".into())),
        }
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted[0].0 != 0.0 {
        return Err(ModelError::Schema(format!(
            "lowest bin starts at {}, not 0",
            sorted[0].0
        )));
    }
    let mut finite = vec![0.0];
    for w in sorted.windows(2) {
        match w[0].1 {
            Upper::Finite(u) if u == w[1].0 => finite.push(u),
            Upper::Finite(u) => {
                return Err(ModelError::Schema(format!(
                    "gap or overlap between bins ending at {u} and starting at {}",
                    w[1].0
                )))
            }
            Upper::Infinite => {
                return Err(ModelError::Schema(
                    "only the last bin may be unbounded".into(),
                ))
            }
        }
    }
    if sorted.last().expect("non-empty").1 != Upper::Infinite {
        return Err(ModelError::Schema("highest bin must be unbounded".into()));
    }
    let knots = KnotVector::new(finite, true).map_err(|e| ModelError::Schema(e.to_string()))?;
    Ok((sorted.into_iter().map(|t| t.2).collect(), knots))
}

/// Bins up to and including `median_bin` are uniform; the rest are Pareto.
pub fn family_roles(n_bins: usize, median_bin: usize) -> Vec<BinRole> {
    (0..n_bins)
        .map(|k| if k <= median_bin { BinRole::Uniform } else { BinRole::Pareto })
        .collect()
}

/// Builds the tract model from bin, mean and median estimates.
pub fn build_spec(
    estimates: &TractEstimates,
    prior: PriorSettings,
    median_options: MedianOptions,
) -> Result<ModelSpec, ModelError> {
    let (bins, knots) = knots_from_bins(&estimates.bins)?;
    let k = knots.n_bins();
    let median = &estimates.median;
    if !matches!(median.kind, EstimateKind::Quantile { .. }) {
        return Err(ModelError::Spec("median record must be a quantile".into()));
    }
    let median_bin = knots.bin_of(median.value).ok_or_else(|| {
        ModelError::Spec(format!("median {} lies outside the support", median.value))
    })?;
    if median_bin + 1 >= k {
        return Err(ModelError::Spec(format!(
            "median {} lies in the unbounded top bin; at least one Pareto bin must sit above it",
            median.value
        )));
    }
    let values: Vec<f64> = bins.iter().map(|b| b.value).collect();
    let inverted = invert_quantile(
        median,
        &values,
        &knots,
        median_options.plug_in,
        median_options.scale,
    )?;
    let mut data: Vec<ModelDatum> = bins.into_iter().map(ModelDatum::Estimate).collect();
    if let Some(mean) = estimates.mean {
        if mean.kind != EstimateKind::Mean {
            return Err(ModelError::Spec("mean record must have the mean kind".into()));
        }
        data.push(ModelDatum::Estimate(mean));
    }
    data.push(ModelDatum::InvertedQuantile(inverted));
    ModelSpec::new(knots, family_roles(k, median_bin), data, prior, median_bin)
}

/// Per-evaluation constrained state.
#[derive(Debug, Clone, Default)]
pub(crate) struct Unpacked {
    pub stick: StickState,
    /// Shape per bin; 0 for uniform bins.
    pub alphas: Vec<f64>,
    pub cum: Vec<f64>,
    pub log_jacobian: f64,
}

enum CdfParts {
    Below,
    Above,
    In { j: usize, f: f64, f_alpha: f64 },
}

impl ModelSpec {
    pub fn new(
        knots: KnotVector,
        roles: Vec<BinRole>,
        data: Vec<ModelDatum>,
        prior: PriorSettings,
        median_bin: usize,
    ) -> Result<Self, ModelError> {
        let k = knots.n_bins();
        if k < 2 {
            return Err(ModelError::Spec("the model needs at least two bins".into()));
        }
        if roles.len() != k {
            return Err(ModelError::Spec(format!("{} roles for {k} bins", roles.len())));
        }
        for (i, role) in roles.iter().enumerate() {
            if *role == BinRole::Pareto && knots.lower(i) <= 0.0 {
                return Err(ModelError::Spec(format!(
                    "Pareto bin {i} needs a positive lower knot"
                )));
            }
            if *role == BinRole::Uniform && knots.upper(i) == Upper::Infinite {
                return Err(ModelError::Spec("the unbounded bin cannot be uniform".into()));
            }
        }
        let center = prior.normalized_center(k)?;
        let conc: Vec<f64> = center.iter().map(|g| g / prior.scale).collect();
        let dirichlet_const =
            ln_gamma(conc.iter().sum()) - conc.iter().map(|c| ln_gamma(*c)).sum::<f64>();
        let finite = knots.finite_knots();
        let plans = data
            .iter()
            .map(|d| match d {
                ModelDatum::Estimate(rec) => match rec.kind {
                    EstimateKind::BinProportion { lower, upper } => {
                        let aligned = finite
                            .iter()
                            .position(|&v| v == lower)
                            .filter(|&j| j < k && knots.upper(j) == upper);
                        Ok(match aligned {
                            Some(j) => DatumPlan::KnotBin(j),
                            None => DatumPlan::Range(lower, upper),
                        })
                    }
                    EstimateKind::Mean => Ok(DatumPlan::Mean),
                    EstimateKind::Quantile { .. } => Err(ModelError::Spec(
                        "quantile records must be inverted before entering the model".into(),
                    )),
                },
                ModelDatum::InvertedQuantile(q) => {
                    if q.effective_sd > 0.0 && q.effective_sd.is_finite() {
                        Ok(DatumPlan::Cdf(q.q))
                    } else {
                        Err(ModelError::Spec("inverted quantile sd must be positive".into()))
                    }
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pareto_bins = (0..k).filter(|&i| roles[i] == BinRole::Pareto).collect();
        Ok(Self {
            knots,
            roles,
            data,
            prior,
            center,
            median_bin,
            plans,
            dirichlet_const,
            pareto_bins,
        })
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn roles(&self) -> &[BinRole] {
        &self.roles
    }

    pub fn data(&self) -> &[ModelDatum] {
        &self.data
    }

    pub fn prior(&self) -> &PriorSettings {
        &self.prior
    }

    /// Normalised Dirichlet centre `g`.
    pub fn prior_center(&self) -> &[f64] {
        &self.center
    }

    pub fn median_bin(&self) -> usize {
        self.median_bin
    }

    pub fn n_bins(&self) -> usize {
        self.knots.n_bins()
    }

    pub fn n_pareto(&self) -> usize {
        self.pareto_bins.len()
    }

    pub fn pareto_bins(&self) -> &[usize] {
        &self.pareto_bins
    }

    pub fn n_uniform(&self) -> usize {
        self.n_bins() - self.n_pareto()
    }

    /// Length of the unconstrained parameter vector.
    pub fn dim(&self) -> usize {
        self.n_bins() - 1 + self.n_pareto()
    }

    /// Number of likelihood terms.
    pub fn n_likelihood_terms(&self) -> usize {
        self.data.len()
    }

    fn family(&self, k: usize, alpha: f64) -> BinFamily {
        match (self.roles[k], self.knots.upper(k)) {
            (BinRole::Uniform, _) => BinFamily::Uniform,
            (BinRole::Pareto, Upper::Infinite) => BinFamily::UnboundedPareto { alpha },
            (BinRole::Pareto, Upper::Finite(_)) => BinFamily::TruncatedPareto { alpha },
        }
    }

    fn shape(&self, k: usize, alpha: f64) -> BinShape {
        BinShape {
            lower: self.knots.lower(k),
            upper: self.knots.upper(k),
            family: self.family(k, alpha),
        }
    }

    pub(crate) fn unpack(&self, theta: &[f64], out: &mut Unpacked) {
        let k = self.n_bins();
        out.stick.fill(&theta[..k - 1]);
        out.alphas.clear();
        out.alphas.resize(k, 0.0);
        let mut lj = out.stick.log_jacobian;
        for (s, &bin) in theta[k - 1..].iter().zip(&self.pareto_bins) {
            out.alphas[bin] = alpha_from_shift(*s);
            lj += s;
        }
        out.cum.clear();
        let mut acc = 0.0;
        out.cum.push(0.0);
        for p in &out.stick.probs {
            acc += p;
            out.cum.push(acc);
        }
        out.log_jacobian = lj;
    }

    /// Constrained density and the log-Jacobian of the map.
    pub fn transform(&self, pv: &ParameterVector) -> Result<(PiecewiseDensity, f64), ModelError> {
        if pv.stick.len() != self.n_bins() - 1 || pv.log_alpha_shift.len() != self.n_pareto() {
            return Err(ModelError::Spec("parameter vector has the wrong shape".into()));
        }
        let mut u = Unpacked::default();
        self.unpack(&pv.to_flat(), &mut u);
        Ok((self.density_from(&u)?, u.log_jacobian))
    }

    /// Density for a flat unconstrained vector.
    pub fn density_at(&self, theta: &[f64]) -> Result<PiecewiseDensity, ModelError> {
        let mut u = Unpacked::default();
        self.unpack(theta, &mut u);
        self.density_from(&u)
    }

    pub(crate) fn density_from(&self, u: &Unpacked) -> Result<PiecewiseDensity, ModelError> {
        let fams = (0..self.n_bins()).map(|k| self.family(k, u.alphas[k])).collect();
        Ok(PiecewiseDensity::new(
            self.knots.clone(),
            u.stick.probs.clone(),
            fams,
        )?)
    }

    /// Inverse of [`ModelSpec::transform`].
    pub fn untransform(&self, d: &PiecewiseDensity) -> Result<ParameterVector, ModelError> {
        if d.n_bins() != self.n_bins() {
            return Err(ModelError::Spec("density has the wrong number of bins".into()));
        }
        let mut shifts = Vec::with_capacity(self.n_pareto());
        for &k in &self.pareto_bins {
            let a = d.families()[k]
                .alpha()
                .ok_or_else(|| ModelError::Spec(format!("bin {k} should be Pareto")))?;
            if a <= 1.0 {
                return Err(ModelError::Spec(format!("shape {a} is outside (1, inf)")));
            }
            shifts.push(shift_from_alpha(a));
        }
        Ok(ParameterVector {
            stick: stick_from_probs(d.probs()),
            log_alpha_shift: shifts,
        })
    }

    /// Dirichlet plus truncated-normal log prior density on the constrained scale.
    pub fn log_prior(&self, d: &PiecewiseDensity) -> f64 {
        let t = self.prior.scale;
        let mut lp = self.dirichlet_const;
        for (p, g) in d.probs().iter().zip(&self.center) {
            lp += (g / t - 1.0) * p.ln();
        }
        for &k in &self.pareto_bins {
            lp += self.prior.alpha.ln_pdf(d.families()[k].alpha().unwrap_or(f64::NAN));
        }
        lp
    }

    /// Sum of the data-model log densities.
    pub fn log_likelihood(&self, d: &PiecewiseDensity) -> Result<f64, ModelError> {
        let mut ll = 0.0;
        for datum in &self.data {
            ll += match datum {
                ModelDatum::Estimate(rec) => crate::functionals::loglik_record(d, rec)?,
                ModelDatum::InvertedQuantile(q) => {
                    crate::functionals::loglik_inverted_quantile(d, q)
                }
            };
        }
        Ok(ll)
    }

    /// Pointwise data-model log densities, one per datum.
    pub fn pointwise_log_likelihood(&self, d: &PiecewiseDensity) -> Result<Vec<f64>, ModelError> {
        self.data
            .iter()
            .map(|datum| match datum {
                ModelDatum::Estimate(rec) => Ok(crate::functionals::loglik_record(d, rec)?),
                ModelDatum::InvertedQuantile(q) => {
                    Ok(crate::functionals::loglik_inverted_quantile(d, q))
                }
            })
            .collect()
    }

    /// Log posterior (including the log-Jacobian) at an unconstrained point.
    pub fn log_posterior(&self, pv: &ParameterVector) -> f64 {
        let theta = pv.to_flat();
        let mut g = vec![0.0; theta.len()];
        self.log_posterior_and_gradient(&theta, &mut g)
    }

    /// Log posterior and its gradient on the unconstrained scale.
    pub fn log_posterior_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.log_density_with(theta, grad, true)
    }

    /// As [`ModelSpec::log_posterior_and_gradient`], optionally dropping the
    /// log-Jacobian (the result is then a density on the constrained scale
    /// expressed in unconstrained coordinates).
    pub fn log_density_with(&self, theta: &[f64], grad: &mut [f64], jacobian: bool) -> f64 {
        let k = self.n_bins();
        let mut u = Unpacked::default();
        self.unpack(theta, &mut u);
        let mut gp = vec![0.0; k];
        let mut ga = vec![0.0; k];
        let lp = self.accumulate(&u, &mut gp, &mut ga);
        self.chain(&u, &gp, &ga, grad, jacobian);
        if jacobian {
            lp + u.log_jacobian
        } else {
            lp
        }
    }

    fn cdf_parts(&self, u: &Unpacked, x: f64) -> CdfParts {
        if x <= self.knots.first() {
            return CdfParts::Below;
        }
        match self.knots.bin_of(x) {
            None => CdfParts::Above,
            Some(j) => {
                let shape = self.shape(j, u.alphas[j]);
                CdfParts::In {
                    j,
                    f: shape.cdf_inside(x),
                    f_alpha: shape.cdf_alpha_grad(x),
                }
            }
        }
    }

    fn cdf_value(&self, u: &Unpacked, parts: &CdfParts) -> f64 {
        match *parts {
            CdfParts::Below => 0.0,
            CdfParts::Above => 1.0,
            CdfParts::In { j, f, .. } => u.cum[j] + u.stick.probs[j] * f,
        }
    }

    fn cdf_accumulate(&self, u: &Unpacked, parts: &CdfParts, w: f64, gp: &mut [f64], ga: &mut [f64]) {
        match *parts {
            CdfParts::Below => {}
            CdfParts::Above => gp.iter_mut().for_each(|g| *g += w),
            CdfParts::In { j, f, f_alpha } => {
                gp[..j].iter_mut().for_each(|g| *g += w);
                gp[j] += w * f;
                ga[j] += w * u.stick.probs[j] * f_alpha;
            }
        }
    }

    /// Prior plus likelihood on the constrained scale; adds `∂/∂p` and `∂/∂α`.
    pub(crate) fn accumulate(&self, u: &Unpacked, gp: &mut [f64], ga: &mut [f64]) -> f64 {
        let probs = &u.stick.probs;
        let t = self.prior.scale;
        let mut lp = self.dirichlet_const;
        for ((p, g), d) in probs.iter().zip(&self.center).zip(gp.iter_mut()) {
            let c = g / t - 1.0;
            lp += c * p.ln();
            *d += c / p;
        }
        for &k in &self.pareto_bins {
            lp += self.prior.alpha.ln_pdf(u.alphas[k]);
            ga[k] += self.prior.alpha.d_ln_pdf(u.alphas[k]);
        }
        let mut mean_cache: Option<(f64, Vec<f64>, Vec<f64>)> = None;
        for (datum, plan) in self.data.iter().zip(&self.plans) {
            let (obs, sd) = match datum {
                ModelDatum::Estimate(r) => (r.value, r.se),
                ModelDatum::InvertedQuantile(q) => (q.tau, q.effective_sd),
            };
            match *plan {
                DatumPlan::KnotBin(j) => {
                    let q = probs[j];
                    lp += normal_ln_pdf(obs, q, sd);
                    gp[j] += (obs - q) / (sd * sd);
                }
                DatumPlan::Cdf(x) => {
                    let parts = self.cdf_parts(u, x);
                    let q = self.cdf_value(u, &parts);
                    lp += normal_ln_pdf(obs, q, sd);
                    self.cdf_accumulate(u, &parts, (obs - q) / (sd * sd), gp, ga);
                }
                DatumPlan::Range(a, b) => {
                    let lo = self.cdf_parts(u, a);
                    let hi = match b {
                        Upper::Finite(v) => self.cdf_parts(u, v),
                        Upper::Infinite => CdfParts::Above,
                    };
                    let q = self.cdf_value(u, &hi) - self.cdf_value(u, &lo);
                    lp += normal_ln_pdf(obs, q, sd);
                    let w = (obs - q) / (sd * sd);
                    self.cdf_accumulate(u, &hi, w, gp, ga);
                    self.cdf_accumulate(u, &lo, -w, gp, ga);
                }
                DatumPlan::Mean => {
                    let (mu, mus, dmus) = mean_cache.get_or_insert_with(|| {
                        let k = self.n_bins();
                        let mut mus = vec![0.0; k];
                        let mut dmus = vec![0.0; k];
                        let mut mu = 0.0;
                        for j in 0..k {
                            let shape = self.shape(j, u.alphas[j]);
                            // α > 1 on every reachable point, so the mean exists
                            mus[j] = shape.mean().unwrap_or(f64::NAN);
                            dmus[j] = shape.mean_alpha_grad();
                            mu += probs[j] * mus[j];
                        }
                        (mu, mus, dmus)
                    });
                    lp += normal_ln_pdf(obs, *mu, sd);
                    let w = (obs - *mu) / (sd * sd);
                    for j in 0..gp.len() {
                        gp[j] += w * mus[j];
                        ga[j] += w * probs[j] * dmus[j];
                    }
                }
            }
        }
        lp
    }

    /// Chains constrained-scale derivatives to the unconstrained gradient.
    pub(crate) fn chain(&self, u: &Unpacked, gp: &[f64], ga: &[f64], grad: &mut [f64], jacobian: bool) {
        let k = self.n_bins();
        u.stick.backward(gp, &mut grad[..k - 1]);
        if !jacobian {
            // remove the log-Jacobian contribution added by the reverse pass
            let mut jac_only = vec![0.0; k - 1];
            u.stick.backward(&vec![0.0; k], &mut jac_only);
            for (g, j) in grad[..k - 1].iter_mut().zip(&jac_only) {
                *g -= j;
            }
        }
        for (i, &bin) in self.pareto_bins.iter().enumerate() {
            let a = u.alphas[bin];
            grad[k - 1 + i] = ga[bin] * (a - 1.0) + if jacobian { 1.0 } else { 0.0 };
        }
    }

    /// Deterministic starting point near the prior centre.
    pub fn prior_center_point(&self) -> ParameterVector {
        ParameterVector {
            stick: stick_from_probs(&self.center),
            log_alpha_shift: vec![0.0; self.n_pareto()],
        }
    }
}

impl LogDensity for ModelSpec {
    fn dim(&self) -> usize {
        ModelSpec::dim(self)
    }

    fn log_density_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.log_posterior_and_gradient(theta, grad)
    }
}
