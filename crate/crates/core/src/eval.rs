//! WAIC per estimate type and the point-estimate metric kit.
//!
//! WAIC is on the "larger is better" scale: the log of the posterior mean
//! data-model density minus the posterior variance (denominator `M - 1`) of
//! the log density.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::PiecewiseDensity;
use crate::functionals::{loglik_record, EstimateRecord};
use crate::stats::{log_sum_exp, mean, sample_variance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no values to evaluate")]
    Empty,
    #[error("length mismatch: {0} estimates against {1} reference values")]
    LengthMismatch(usize, usize),
    #[error("WAIC needs at least two draws, got {0}")]
    TooFewDraws(usize),
}

/// `log((1/M) Σ exp(x_m))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// WAIC contribution of one observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointwiseWaic {
    pub value: f64,
    pub log_mean_density: f64,
    pub variance: f64,
    /// Set when any log-likelihood draw is not finite; `value` is then `-inf`.
    pub non_finite: bool,
}

pub fn waic_pointwise(loglik: &[f64]) -> Result<PointwiseWaic, EvalError> {
    if loglik.len() < 2 {
        return Err(EvalError::TooFewDraws(loglik.len()));
    }
    if loglik.iter().any(|v| !v.is_finite()) {
        return Ok(PointwiseWaic {
            value: f64::NEG_INFINITY,
            log_mean_density: log_mean_exp(loglik),
            variance: f64::NAN,
            non_finite: true,
        });
    }
    let lme = log_mean_exp(loglik);
    let var = sample_variance(loglik);
    Ok(PointwiseWaic {
        value: lme - var,
        log_mean_density: lme,
        variance: var,
        non_finite: false,
    })
}

/// Data-model log density of a record under each posterior draw. Quantile
/// records use the Gaussian on the quantile scale; a draw whose functional is
/// undefined contributes `-inf`.
pub fn record_log_likelihood(densities: &[PiecewiseDensity], rec: &EstimateRecord) -> Vec<f64> {
    densities
        .iter()
        .map(|d| loglik_record(d, rec).unwrap_or(f64::NEG_INFINITY))
        .collect()
}

/// One (area, estimate type) observation; `loglik` is `None` when the
/// estimate is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct WaicTerm {
    pub area: String,
    pub estimate_type: String,
    pub loglik: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicGroup {
    pub estimate_type: String,
    pub waic_sum: f64,
    /// `sqrt(n * sample variance of the pointwise terms)`; `None` when a term
    /// is not finite.
    pub se: Option<f64>,
    pub n: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicPoint {
    pub area: String,
    pub estimate_type: String,
    pub waic: PointwiseWaic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicReport {
    /// Groups in order of first appearance.
    pub groups: Vec<WaicGroup>,
    pub pointwise: Vec<WaicPoint>,
}

impl WaicReport {
    pub fn group(&self, estimate_type: &str) -> Option<&WaicGroup> {
        self.groups.iter().find(|g| g.estimate_type == estimate_type)
    }
}

pub fn waic_by_type(terms: &[WaicTerm]) -> Result<WaicReport, EvalError> {
    let mut order: Vec<&str> = Vec::new();
    for t in terms {
        if !order.contains(&t.estimate_type.as_str()) {
            order.push(&t.estimate_type);
        }
    }
    let mut pointwise = Vec::new();
    for t in terms {
        if let Some(ll) = &t.loglik {
            pointwise.push(WaicPoint {
                area: t.area.clone(),
                estimate_type: t.estimate_type.clone(),
                waic: waic_pointwise(ll)?,
            });
        }
    }
    let groups = order
        .into_iter()
        .map(|ty| {
            let values: Vec<f64> = pointwise
                .iter()
                .filter(|p| p.estimate_type == ty)
                .map(|p| p.waic.value)
                .collect();
            let n = values.len();
            let finite = values.iter().all(|v| v.is_finite());
            WaicGroup {
                estimate_type: ty.to_string(),
                waic_sum: values.iter().sum(),
                se: finite.then(|| (n as f64 * sample_variance(&values)).sqrt()),
                n,
                n_excluded: terms
                    .iter()
                    .filter(|t| t.estimate_type == ty && t.loglik.is_none())
                    .count(),
            }
        })
        .collect();
    Ok(WaicReport { groups, pointwise })
}

/// RMSE, MAD, RMSPE and MAPE; percentage metrics are in percent and skip
/// zero reference values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mad: f64,
    pub rmspe: Option<f64>,
    pub mape: Option<f64>,
    pub n: usize,
    pub n_zero_truth: usize,
}

pub fn metrics(estimates: &[f64], truths: &[f64]) -> Result<Metrics, EvalError> {
    if estimates.len() != truths.len() {
        return Err(EvalError::LengthMismatch(estimates.len(), truths.len()));
    }
    if estimates.is_empty() {
        return Err(EvalError::Empty);
    }
    let err: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| e - t).collect();
    let rmse = mean(&err.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt();
    let mad = mean(&err.iter().map(|e| e.abs()).collect::<Vec<_>>());
    let pct: Vec<f64> = err
        .iter()
        .zip(truths)
        .filter(|(_, t)| **t != 0.0)
        .map(|(e, t)| 100.0 * e / t)
        .collect();
    let (rmspe, mape) = if pct.is_empty() {
        (None, None)
    } else {
        (
            Some(mean(&pct.iter().map(|p| p * p).collect::<Vec<_>>()).sqrt()),
            Some(mean(&pct.iter().map(|p| p.abs()).collect::<Vec<_>>())),
        )
    };
    Ok(Metrics {
        rmse,
        mad,
        rmspe,
        mape,
        n: estimates.len(),
        n_zero_truth: truths.len() - pct.len(),
    })
}

/// Share of `(lower, upper)` intervals containing their reference value.
pub fn coverage(intervals: &[(f64, f64)], references: &[f64]) -> Result<f64, EvalError> {
    if intervals.len() != references.len() {
        return Err(EvalError::LengthMismatch(intervals.len(), references.len()));
    }
    if intervals.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = intervals
        .iter()
        .zip(references)
        .filter(|((lo, hi), r)| lo <= *r && *r <= hi)
        .count();
    Ok(hits as f64 / intervals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_draw_oracle() {
        let ll = [-1.0, -2.0, -3.0];
        let w = waic_pointwise(&ll).unwrap();
        let lme = (((-1.0f64).exp() + (-2.0f64).exp() + (-3.0f64).exp()) / 3.0).ln();
        // deviations (1, 0, -1) over M - 1 = 2
        let var = 1.0;
        assert!((w.log_mean_density - lme).abs() < 1e-15);
        assert_eq!(w.variance, var);
        assert!((w.value - (lme - var)).abs() < 1e-15);
    }

    #[test]
    fn constant_loglik_gives_itself() {
        let w = waic_pointwise(&[-4.25; 10]).unwrap();
        assert!((w.value + 4.25).abs() < 1e-14);
        assert_eq!(w.variance, 0.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(waic_pointwise(&[1.0]), Err(EvalError::TooFewDraws(1)));
        let w = waic_pointwise(&[f64::NEG_INFINITY; 3]).unwrap();
        assert!(w.non_finite);
        assert_eq!(w.value, f64::NEG_INFINITY);
    }

    #[test]
    fn worse_draw_lowers_log_mean() {
        let base = [-1.0, -1.5, -0.5];
        let worse = [-1.0, -1.5, -0.5, -10.0];
        assert!(log_mean_exp(&worse) < log_mean_exp(&base));
    }

    #[test]
    fn two_area_two_type_fixture() {
        let t = |a: &str, ty: &str, ll: Option<Vec<f64>>| WaicTerm {
            area: a.into(),
            estimate_type: ty.into(),
            loglik: ll,
        };
        let terms = vec![
            t("a", "p20", Some(vec![-1.0, -1.0])),
            t("a", "p40", Some(vec![0.0, -2.0])),
            t("b", "p20", Some(vec![-3.0, -3.0])),
            t("b", "p40", None),
        ];
        let r = waic_by_type(&terms).unwrap();
        let p20 = r.group("p20").unwrap();
        assert_eq!(p20.waic_sum, -4.0);
        assert_eq!(p20.n, 2);
        // sample variance of (-1, -3) is 2, so SE = sqrt(2 * 2)
        assert!((p20.se.unwrap() - 2.0).abs() < 1e-15);
        let p40 = r.group("p40").unwrap();
        let lme = ((1.0 + (-2.0f64).exp()) / 2.0).ln();
        assert!((p40.waic_sum - (lme - 2.0)).abs() < 1e-15);
        assert_eq!(p40.se, Some(0.0));
        assert_eq!(p40.n_excluded, 1);
        let total: f64 = r.pointwise.iter().map(|p| p.waic.value).sum();
        assert_eq!(total, r.groups.iter().map(|g| g.waic_sum).sum::<f64>());
    }

    #[test]
    fn metric_fixtures() {
        let m = metrics(&[110.0], &[100.0]).unwrap();
        assert!((m.rmse - 10.0).abs() < 1e-12 && (m.mad - 10.0).abs() < 1e-12);
        assert!((m.rmspe.unwrap() - 10.0).abs() < 1e-12);
        assert!((m.mape.unwrap() - 10.0).abs() < 1e-12);

        let m = metrics(&[1.0, 2.0, 3.0, 4.0], &[2.0, 2.0, 1.0, 8.0]).unwrap();
        // errors -1, 0, 2, -4; percent errors -50, 0, 200, -50
        assert!((m.rmse - (21.0f64 / 4.0).sqrt()).abs() < 1e-12);
        assert!((m.mad - 7.0 / 4.0).abs() < 1e-12);
        assert!((m.rmspe.unwrap() - (45000.0f64 / 4.0).sqrt()).abs() < 1e-9);
        assert!((m.mape.unwrap() - 75.0).abs() < 1e-12);

        let m = metrics(&[1.0, 3.0], &[0.0, 2.0]).unwrap();
        assert_eq!(m.n_zero_truth, 1);
        assert!((m.mape.unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(metrics(&[], &[]), Err(EvalError::Empty));
        assert!(matches!(metrics(&[1.0], &[]), Err(EvalError::LengthMismatch(1, 0))));
    }

    #[test]
    fn coverage_counts_closed_intervals() {
        let c = coverage(&[(0.0, 1.0), (0.0, 1.0), (2.0, 3.0)], &[1.0, 0.5, 1.0]).unwrap();
        assert!((c - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn jensen_and_power_mean(xs in prop::collection::vec(-50.0f64..5.0, 2..40)) {
            prop_assert!(log_mean_exp(&xs) >= mean(&xs) - 1e-12);
            let truths: Vec<f64> = xs.iter().map(|x| x * 0.5 + 1.0).collect();
            let m = metrics(&xs, &truths).unwrap();
            prop_assert!(m.rmse >= m.mad - 1e-12);
        }

        #[test]
        fn waic_ignores_draw_order(mut xs in prop::collection::vec(-20.0f64..0.0, 2..30)) {
            let a = waic_pointwise(&xs).unwrap().value;
            xs.reverse();
            let b = waic_pointwise(&xs).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
