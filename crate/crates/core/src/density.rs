//! Piecewise latent densities built from uniform and Pareto bins.
//!
//! A [`PiecewiseDensity`] places probability `p_k` on each bin `(κ_k, κ_{k+1}]`
//! and spreads it inside the bin with a [`BinFamily`]. Every functional needed
//! by the data model (CDF, quantile, mean, variance, bin mass) is closed form.
//!
//! Bins are left-open and right-closed. The one exception is the lowest knot:
//! a value exactly equal to `κ_1` is treated as belonging to the first bin so
//! that zero incomes are representable when `κ_1 = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `Σ p_k = 1` accepted at construction.
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("invalid knots: {0}")]
    InvalidKnots(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("argument outside domain: {0}")]
    Domain(String),
    #[error("quantile at level 1 is unbounded when the last knot is infinite")]
    UnboundedQuantile,
    #[error("{moment} does not exist for an unbounded Pareto bin with alpha = {alpha}")]
    MomentUndefined { moment: &'static str, alpha: f64 },
}

/// Upper edge of a bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Upper {
    Finite(f64),
    Infinite,
}

impl Upper {
    pub fn finite(self) -> Option<f64> {
        match self {
            Upper::Finite(v) => Some(v),
            Upper::Infinite => None,
        }
    }

    /// Maps `f64::INFINITY` onto the explicit marker.
    pub fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            Upper::Infinite
        } else {
            Upper::Finite(v)
        }
    }

    pub fn to_f64(self) -> f64 {
        match self {
            Upper::Finite(v) => v,
            Upper::Infinite => f64::INFINITY,
        }
    }
}

/// Strictly increasing bin boundaries. Only the final knot may be infinite; it
/// is stored as a flag rather than as a floating-point infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    finite: Vec<f64>,
    unbounded: bool,
}

impl KnotVector {
    /// `finite` holds every finite knot; when `unbounded` is set an implicit
    /// final knot at +infinity closes the last bin.
    pub fn new(finite: Vec<f64>, unbounded: bool) -> Result<Self, DensityError> {
        let needed = if unbounded { 1 } else { 2 };
        if finite.len() < needed {
            return Err(DensityError::InvalidKnots(format!(
                "need at least {needed} finite knots, got {}",
                finite.len()
            )));
        }
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(DensityError::InvalidKnots(
                "only the last knot may be infinite".into(),
            ));
        }
        if finite[0] < 0.0 {
            return Err(DensityError::InvalidKnots(format!(
                "first knot must be >= 0, got {}",
                finite[0]
            )));
        }
        if finite.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DensityError::InvalidKnots(
                "knots must be strictly increasing".into(),
            ));
        }
        Ok(Self { finite, unbounded })
    }

    /// Builds from a slice whose last element may be `f64::INFINITY`.
    pub fn from_values(values: &[f64]) -> Result<Self, DensityError> {
        match values.split_last() {
            Some((last, rest)) if *last == f64::INFINITY => Self::new(rest.to_vec(), true),
            _ => Self::new(values.to_vec(), false),
        }
    }

    /// Number of bins `K`.
    pub fn n_bins(&self) -> usize {
        if self.unbounded {
            self.finite.len()
        } else {
            self.finite.len() - 1
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.unbounded
    }

    pub fn finite_knots(&self) -> &[f64] {
        &self.finite
    }

    pub fn first(&self) -> f64 {
        self.finite[0]
    }

    pub fn last(&self) -> Upper {
        if self.unbounded {
            Upper::Infinite
        } else {
            Upper::Finite(*self.finite.last().expect("non-empty"))
        }
    }

    pub fn lower(&self, k: usize) -> f64 {
        self.finite[k]
    }

    pub fn upper(&self, k: usize) -> Upper {
        if k + 1 < self.finite.len() {
            Upper::Finite(self.finite[k + 1])
        } else {
            Upper::Infinite
        }
    }

    /// Knots as plain floats, with `f64::INFINITY` for an unbounded top.
    pub fn to_values(&self) -> Vec<f64> {
        let mut v = self.finite.clone();
        if self.unbounded {
            v.push(f64::INFINITY);
        }
        v
    }

    /// Index of the bin `(κ_k, κ_{k+1}]` containing `x`; `x == κ_1` maps to the
    /// first bin. `None` outside the support.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        if x.is_nan() || x < self.finite[0] {
            return None;
        }
        if x == self.finite[0] {
            return Some(0);
        }
        // first finite knot >= x
        let idx = self.finite.partition_point(|&k| k < x);
        if idx < self.finite.len() {
            Some(idx - 1)
        } else if self.unbounded {
            Some(self.finite.len() - 1)
        } else {
            None
        }
    }
}

/// Within-bin distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BinFamily {
    Uniform,
    TruncatedPareto { alpha: f64 },
    UnboundedPareto { alpha: f64 },
}

impl BinFamily {
    pub fn alpha(&self) -> Option<f64> {
        match *self {
            BinFamily::Uniform => None,
            BinFamily::TruncatedPareto { alpha } | BinFamily::UnboundedPareto { alpha } => {
                Some(alpha)
            }
        }
    }

    pub fn is_pareto(&self) -> bool {
        !matches!(self, BinFamily::Uniform)
    }
}

/// `(1 - exp(e·log_r)) / e`, continuous through `e = 0` where it equals `-log_r`.
fn ratio_integral(e: f64, log_r: f64) -> f64 {
    let t = e * log_r;
    if t.abs() < 1e-5 {
        -log_r * (1.0 + t / 2.0 + t * t / 6.0)
    } else {
        -t.exp_m1() / e
    }
}

/// Derivative of [`ratio_integral`] with respect to `e`.
fn ratio_integral_de(e: f64, log_r: f64) -> f64 {
    let t = e * log_r;
    if t.abs() < 1e-5 {
        -log_r * log_r * (0.5 + t / 3.0 + t * t / 8.0)
    } else {
        (t.exp_m1() - t * t.exp()) / (e * e)
    }
}

/// One bin with its family: the conditional distribution `f_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinShape {
    pub lower: f64,
    pub upper: Upper,
    pub family: BinFamily,
}

impl BinShape {
    fn validate(&self) -> Result<(), DensityError> {
        match (self.family, self.upper) {
            (BinFamily::Uniform, Upper::Finite(_)) => Ok(()),
            (BinFamily::Uniform, Upper::Infinite) => Err(DensityError::InvalidDensity(
                "a uniform bin needs a finite upper knot".into(),
            )),
            (BinFamily::TruncatedPareto { alpha }, Upper::Finite(_))
            | (BinFamily::UnboundedPareto { alpha }, Upper::Infinite) => {
                if !(alpha.is_finite() && alpha > 0.0) {
                    return Err(DensityError::InvalidDensity(format!(
                        "Pareto shape must be positive and finite, got {alpha}"
                    )));
                }
                if self.lower <= 0.0 {
                    return Err(DensityError::InvalidDensity(
                        "a Pareto bin needs a strictly positive lower knot".into(),
                    ));
                }
                Ok(())
            }
            (BinFamily::TruncatedPareto { .. }, Upper::Infinite) => {
                Err(DensityError::InvalidDensity(
                    "a truncated Pareto bin needs a finite upper knot".into(),
                ))
            }
            (BinFamily::UnboundedPareto { .. }, Upper::Finite(_)) => {
                Err(DensityError::InvalidDensity(
                    "an unbounded Pareto bin must be the last bin with an infinite upper knot"
                        .into(),
                ))
            }
        }
    }

    fn upper_finite(&self) -> f64 {
        self.upper.finite().expect("finite upper knot")
    }

    fn log_ratio(&self) -> f64 {
        (self.lower / self.upper_finite()).ln()
    }

    /// True when `x` lies in the bin under the right-closed convention.
    fn contains(&self, x: f64, is_first: bool) -> bool {
        let above = x > self.lower || (is_first && x == self.lower);
        let below = match self.upper {
            Upper::Finite(b) => x <= b,
            Upper::Infinite => x.is_finite(),
        };
        above && below
    }

    /// Conditional density `f_k(x)` for `x` inside the bin.
    pub fn pdf_inside(&self, x: f64) -> f64 {
        match self.family {
            BinFamily::Uniform => 1.0 / (self.upper_finite() - self.lower),
            BinFamily::TruncatedPareto { alpha } => {
                let z = alpha * ratio_integral(alpha, self.log_ratio());
                alpha / x * (self.lower / x).powf(alpha) / z
            }
            BinFamily::UnboundedPareto { alpha } => alpha / x * (self.lower / x).powf(alpha),
        }
    }

    /// `log f_k(x)` and its derivative in the bin's shape (0 for uniform bins).
    pub fn log_pdf_inside_with_alpha_grad(&self, x: f64) -> (f64, f64) {
        match self.family {
            BinFamily::Uniform => (-(self.upper_finite() - self.lower).ln(), 0.0),
            BinFamily::TruncatedPareto { alpha } => {
                let lr = self.log_ratio();
                let h = ratio_integral(alpha, lr);
                let log_ax = (self.lower / x).ln();
                // Z = α·h(α), log f = log α + α log(a/x) - log x - log Z
                let lp = alpha * log_ax - x.ln() - h.ln();
                let dh = ratio_integral_de(alpha, lr);
                (lp, log_ax - dh / h)
            }
            BinFamily::UnboundedPareto { alpha } => {
                let log_ax = (self.lower / x).ln();
                (alpha.ln() + alpha * log_ax - x.ln(), 1.0 / alpha + log_ax)
            }
        }
    }

    /// Conditional CDF `F_k(x)` for `x` inside the bin (clamped outside).
    pub fn cdf_inside(&self, x: f64) -> f64 {
        if x <= self.lower {
            return 0.0;
        }
        if let Upper::Finite(b) = self.upper {
            if x >= b {
                return 1.0;
            }
        }
        match self.family {
            BinFamily::Uniform => (x - self.lower) / (self.upper_finite() - self.lower),
            BinFamily::TruncatedPareto { alpha } => {
                let z = alpha * ratio_integral(alpha, self.log_ratio());
                let num = -(alpha * (self.lower / x).ln()).exp_m1();
                (num / z).min(1.0)
            }
            BinFamily::UnboundedPareto { alpha } => -(alpha * (self.lower / x).ln()).exp_m1(),
        }
    }

    /// Derivative of `F_k(x)` with respect to the bin's shape.
    pub fn cdf_alpha_grad(&self, x: f64) -> f64 {
        if x <= self.lower {
            return 0.0;
        }
        if let Upper::Finite(b) = self.upper {
            if x >= b {
                return 0.0;
            }
        }
        match self.family {
            BinFamily::Uniform => 0.0,
            BinFamily::TruncatedPareto { alpha } => {
                let lr = self.log_ratio();
                let la = (self.lower / x).ln();
                let u = (alpha * la).exp();
                let v = (alpha * lr).exp();
                let z = alpha * ratio_integral(alpha, lr);
                (-u * la * z + (1.0 - u) * v * lr) / (z * z)
            }
            BinFamily::UnboundedPareto { alpha } => {
                let la = (self.lower / x).ln();
                -(alpha * la).exp() * la
            }
        }
    }

    /// Conditional quantile `F_k^{-1}(u)` for `u` in `[0, 1]`.
    pub fn quantile_inside(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self.family {
            BinFamily::Uniform => {
                let b = self.upper_finite();
                (self.lower + u * (b - self.lower)).min(b)
            }
            BinFamily::TruncatedPareto { alpha } => {
                let b = self.upper_finite();
                let z = alpha * ratio_integral(alpha, self.log_ratio());
                (self.lower * (-(-u * z).ln_1p() / alpha).exp()).clamp(self.lower, b)
            }
            BinFamily::UnboundedPareto { alpha } => {
                if u >= 1.0 {
                    f64::INFINITY
                } else {
                    self.lower * (-(-u).ln_1p() / alpha).exp()
                }
            }
        }
    }

    /// Conditional mean `μ_k`.
    pub fn mean(&self) -> Result<f64, DensityError> {
        match self.family {
            BinFamily::Uniform => Ok(0.5 * (self.lower + self.upper_finite())),
            BinFamily::TruncatedPareto { alpha } => {
                let lr = self.log_ratio();
                Ok(self.lower * ratio_integral(alpha - 1.0, lr) / ratio_integral(alpha, lr))
            }
            BinFamily::UnboundedPareto { alpha } => {
                if alpha <= 1.0 {
                    Err(DensityError::MomentUndefined {
                        moment: "mean",
                        alpha,
                    })
                } else {
                    Ok(alpha * self.lower / (alpha - 1.0))
                }
            }
        }
    }

    /// Derivative of `μ_k` with respect to the bin's shape.
    pub fn mean_alpha_grad(&self) -> f64 {
        match self.family {
            BinFamily::Uniform => 0.0,
            BinFamily::TruncatedPareto { alpha } => {
                let lr = self.log_ratio();
                let h1 = ratio_integral(alpha - 1.0, lr);
                let h0 = ratio_integral(alpha, lr);
                let d1 = ratio_integral_de(alpha - 1.0, lr);
                let d0 = ratio_integral_de(alpha, lr);
                self.lower * (d1 * h0 - h1 * d0) / (h0 * h0)
            }
            BinFamily::UnboundedPareto { alpha } => -self.lower / ((alpha - 1.0) * (alpha - 1.0)),
        }
    }

    /// Conditional variance `σ_k²`.
    pub fn variance(&self) -> Result<f64, DensityError> {
        match self.family {
            BinFamily::Uniform => {
                let w = self.upper_finite() - self.lower;
                Ok(w * w / 12.0)
            }
            BinFamily::TruncatedPareto { alpha } => {
                let lr = self.log_ratio();
                let h0 = ratio_integral(alpha, lr);
                let m1 = self.lower * ratio_integral(alpha - 1.0, lr) / h0;
                let m2 = self.lower * self.lower * ratio_integral(alpha - 2.0, lr) / h0;
                Ok((m2 - m1 * m1).max(0.0))
            }
            BinFamily::UnboundedPareto { alpha } => {
                if alpha <= 2.0 {
                    Err(DensityError::MomentUndefined {
                        moment: "variance",
                        alpha,
                    })
                } else {
                    let a = self.lower;
                    Ok(alpha * a * a / ((alpha - 1.0) * (alpha - 1.0) * (alpha - 2.0)))
                }
            }
        }
    }
}

/// The latent density `π(x) = Σ_k p_k f_k(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityParts", into = "DensityParts")]
pub struct PiecewiseDensity {
    knots: KnotVector,
    probs: Vec<f64>,
    families: Vec<BinFamily>,
    /// `cum[k] = Σ_{j<k} p_j`, length `K + 1`.
    cum: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DensityParts {
    knots: KnotVector,
    probs: Vec<f64>,
    families: Vec<BinFamily>,
}

impl TryFrom<DensityParts> for PiecewiseDensity {
    type Error = DensityError;
    fn try_from(p: DensityParts) -> Result<Self, Self::Error> {
        PiecewiseDensity::new(p.knots, p.probs, p.families)
    }
}

impl From<PiecewiseDensity> for DensityParts {
    fn from(d: PiecewiseDensity) -> Self {
        DensityParts {
            knots: d.knots,
            probs: d.probs,
            families: d.families,
        }
    }
}

impl PiecewiseDensity {
    pub fn new(
        knots: KnotVector,
        probs: Vec<f64>,
        families: Vec<BinFamily>,
    ) -> Result<Self, DensityError> {
        let k = knots.n_bins();
        if probs.len() != k || families.len() != k {
            return Err(DensityError::InvalidDensity(format!(
                "{k} bins but {} probabilities and {} families",
                probs.len(),
                families.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DensityError::InvalidDensity(
                "bin probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(DensityError::InvalidDensity(format!(
                "bin probabilities sum to {total}, not 1"
            )));
        }
        for (i, fam) in families.iter().enumerate() {
            BinShape {
                lower: knots.lower(i),
                upper: knots.upper(i),
                family: *fam,
            }
            .validate()?;
        }
        let mut cum = Vec::with_capacity(k + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for p in &probs {
            acc += p;
            cum.push(acc);
        }
        Ok(Self {
            knots,
            probs,
            families,
            cum,
        })
    }

    /// Convenience constructor with every bin uniform.
    pub fn uniform_bins(knots: &[f64], probs: Vec<f64>) -> Result<Self, DensityError> {
        let kv = KnotVector::from_values(knots)?;
        let fams = vec![BinFamily::Uniform; kv.n_bins()];
        Self::new(kv, probs, fams)
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn families(&self) -> &[BinFamily] {
        &self.families
    }

    pub fn n_bins(&self) -> usize {
        self.probs.len()
    }

    /// `Σ_{j<k} p_j` for `k` in `0..=K`.
    pub fn cumulative(&self) -> &[f64] {
        &self.cum
    }

    pub fn bin(&self, k: usize) -> BinShape {
        BinShape {
            lower: self.knots.lower(k),
            upper: self.knots.upper(k),
            family: self.families[k],
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self.knots.bin_of(x) {
            Some(k) if self.probs[k] > 0.0 => self.probs[k] * self.bin(k).pdf_inside(x),
            _ => 0.0,
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match self.knots.bin_of(x) {
            Some(k) if self.probs[k] > 0.0 => {
                self.probs[k].ln() + self.bin(k).log_pdf_inside_with_alpha_grad(x).0
            }
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if x <= self.knots.first() {
            return 0.0;
        }
        match self.knots.bin_of(x) {
            Some(j) => (self.cum[j] + self.probs[j] * self.bin(j).cdf_inside(x)).min(1.0),
            None => 1.0,
        }
    }

    /// Inverse CDF. Bins with zero probability are never returned; among
    /// eligible bins the smallest index wins.
    pub fn quantile(&self, tau: f64) -> Result<f64, DensityError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(DensityError::Domain(format!(
                "quantile level must be in [0, 1], got {tau}"
            )));
        }
        if tau == 0.0 {
            return Ok(self.knots.first());
        }
        if tau == 1.0 {
            return self
                .knots
                .last()
                .finite()
                .ok_or(DensityError::UnboundedQuantile);
        }
        let k = self.n_bins();
        let j = (0..k)
            .find(|&j| self.probs[j] > 0.0 && self.cum[j + 1] >= tau)
            .or_else(|| (0..k).rev().find(|&j| self.probs[j] > 0.0))
            .expect("a simplex has a positive entry");
        let u = (tau - self.cum[j]) / self.probs[j];
        Ok(self.bin(j).quantile_inside(u))
    }

    pub fn mean(&self) -> Result<f64, DensityError> {
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p > 0.0 {
                acc += p * self.bin(k).mean()?;
            }
        }
        Ok(acc)
    }

    pub fn variance(&self) -> Result<f64, DensityError> {
        let mu = self.mean()?;
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p > 0.0 {
                let b = self.bin(k);
                let mk = b.mean()?;
                acc += p * (b.variance()? + (mk - mu) * (mk - mu));
            }
        }
        Ok(acc)
    }

    /// `Π(b) - Π(a)`.
    pub fn bin_mass(&self, a: f64, b: f64) -> Result<f64, DensityError> {
        if a.is_nan() || b.is_nan() || a >= b {
            return Err(DensityError::Domain(format!(
                "bin mass needs a < b, got ({a}, {b})"
            )));
        }
        Ok(self.cdf(b) - self.cdf(a))
    }

    /// One draw: pick a bin by its probability, then invert its conditional CDF.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let k = self.n_bins();
        let mut j = self.cum[1..].partition_point(|&c| c <= u).min(k - 1);
        while self.probs[j] == 0.0 {
            // only reachable through rounding at the top of the cumulative sums
            j = (0..k).rev().find(|&i| self.probs[i] > 0.0).unwrap_or(j);
        }
        let v: f64 = rng.random();
        self.bin(j).quantile_inside(v)
    }

    /// `n` i.i.d. draws from the density.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// True if `x` is in the support of bin `k` (right-closed, first knot included).
    pub fn bin_contains(&self, k: usize, x: f64) -> bool {
        self.bin(k).contains(x, k == 0)
    }
}
