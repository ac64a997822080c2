//! `evaluate`: scores a fit against held-out estimates with error metrics,
//! interval coverage and WAIC.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use popinterp::density::Upper;
use popinterp::eval::{coverage, metrics, record_log_likelihood, waic_by_type, Metrics, WaicReport, WaicTerm};
use popinterp::functionals::{EstimateKind, EstimateRecord};
use popinterp::model::ModelDatum;
use popinterp::posterior_predictive::{Feature, Summary};

use super::{hash_input, prln::read_estimates_file, require_path};
use crate::artifacts::{LoadedFit, LoadedGeo};
use crate::config::{nonzero, parse_features, CommandConfig, EvaluateConfig};
use crate::error::{CliError, Result};
use crate::ingest::{read_estimates, GeoTable, RowKind};
use crate::output::{csv_bytes, fmt_num, fmt_opt, Manifest, OutputDir};

pub const METRICS_FILE: &str = "metrics.csv";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const WAIC_HELDOUT_FILE: &str = "waic_heldout.csv";
pub const WAIC_INSAMPLE_FILE: &str = "waic_insample.csv";
pub const WAIC_POINTWISE_FILE: &str = "waic_pointwise.csv";

const METRIC_NAMES: [&str; 4] = ["RMSE", "MAD", "RMSPE", "MAPE"];

fn metric_value(m: &Metrics, name: &str) -> Option<f64> {
    match name {
        "RMSE" => Some(m.rmse),
        "MAD" => Some(m.mad),
        "RMSPE" => m.rmspe,
        _ => m.mape,
    }
}

/// The held-out value of a feature, if the table has one.
fn held_out_value(t: &GeoTable, f: &Feature) -> Option<f64> {
    match f {
        Feature::Percentile { tau } => t
            .quantile(*tau)
            .or_else(|| ((tau - 0.5).abs() < 1e-9).then(|| t.find(RowKind::Median)).flatten())
            .map(|r| r.value),
        Feature::Mean => t.find(RowKind::Mean).map(|r| r.value),
        Feature::Gini => t.find(RowKind::Gini).map(|r| r.value),
    }
}

/// Held-out rows that have a data model, with their type labels.
fn held_out_records(t: &GeoTable, quantiles: &[f64]) -> Result<Vec<(String, EstimateRecord)>> {
    let mut out = Vec::new();
    for r in &t.rows {
        let rec = match r.kind {
            RowKind::Quantile => {
                let tau = r.tau.unwrap_or(0.5);
                if !(r.held_out || quantiles.iter().any(|q| (q - tau).abs() < 1e-9)) {
                    continue;
                }
                (Feature::Percentile { tau }.label(), EstimateRecord::quantile(tau, r.value, r.se))
            }
            RowKind::Median if r.held_out => ("median".into(), EstimateRecord::quantile(0.5, r.value, r.se)),
            RowKind::Mean if r.held_out => ("mean".into(), EstimateRecord::mean(r.value, r.se)),
            _ => continue,
        };
        let (label, rec) = rec;
        out.push((label, rec.map_err(|e| CliError::invalid(format!("{}: {e}", t.geo_id)))?));
    }
    Ok(out)
}

fn datum_label(d: &ModelDatum) -> String {
    match d {
        ModelDatum::Estimate(rec) => match rec.kind {
            EstimateKind::BinProportion { lower, upper } => match upper {
                Upper::Finite(u) => format!("bin_{}_{}", fmt_num(lower), fmt_num(u)),
                Upper::Infinite => format!("bin_{}_inf", fmt_num(lower)),
            },
            EstimateKind::Mean => "mean".into(),
            EstimateKind::Quantile { tau } => Feature::Percentile { tau }.label(),
        },
        ModelDatum::InvertedQuantile(q) if (q.tau - 0.5).abs() < 1e-12 => "median".into(),
        ModelDatum::InvertedQuantile(q) => Feature::Percentile { tau: q.tau }.label(),
    }
}

fn in_sample_terms(fit: &LoadedFit, g: &LoadedGeo, draws_used: Option<usize>) -> Result<Vec<WaicTerm>> {
    let densities = fit.densities(g, draws_used)?;
    let n_terms = g.spec.data().len();
    let mut per_term = vec![Vec::with_capacity(densities.len()); n_terms];
    for d in &densities {
        let ll = g
            .spec
            .pointwise_log_likelihood(d)
            .unwrap_or_else(|_| vec![f64::NEG_INFINITY; n_terms]);
        for (acc, v) in per_term.iter_mut().zip(ll) {
            acc.push(v);
        }
    }
    Ok(g.spec
        .data()
        .iter()
        .zip(per_term)
        .map(|(d, ll)| WaicTerm {
            area: g.geo_id.clone(),
            estimate_type: datum_label(d),
            loglik: Some(ll),
        })
        .collect())
}

fn waic_table(report: &WaicReport, label: &str) -> Result<Vec<u8>> {
    csv_bytes(
        &["type", "model", "waic", "se", "n", "n_excluded"],
        report.groups.iter().map(|g| {
            vec![
                g.estimate_type.clone(),
                label.to_string(),
                fmt_num(g.waic_sum),
                fmt_opt(g.se),
                g.n.to_string(),
                g.n_excluded.to_string(),
            ]
        }),
    )
}

fn waic_or_empty(terms: &[WaicTerm]) -> Result<WaicReport> {
    if terms.is_empty() {
        return Ok(WaicReport {
            groups: Vec::new(),
            pointwise: Vec::new(),
        });
    }
    waic_by_type(terms).map_err(|e| CliError::invalid(e.to_string()))
}

pub fn run(cfg: &EvaluateConfig, out_dir: &Path) -> Result<Manifest> {
    require_path("fit directory", &cfg.fit)?;
    require_path("held-out estimates file", &cfg.estimates)?;
    let features = parse_features(&cfg.features)?;
    let fit = LoadedFit::load(&cfg.fit)?;
    let table = read_estimates(&cfg.estimates, &cfg.ingest)?;
    let prln = if cfg.prln.as_os_str().is_empty() {
        None
    } else {
        Some(read_estimates_file(&cfg.prln)?)
    };
    let draws_used = nonzero(cfg.draws_used);

    let stored: Vec<BTreeMap<String, Summary>> =
        fit.geos.iter().map(|g| fit.features(g)).collect::<Result<_>>()?;
    let held: Vec<Option<&GeoTable>> = fit.geos.iter().map(|g| table.geos.get(&g.geo_id)).collect();
    if held.iter().all(Option::is_none) {
        return Err(CliError::invalid(
            "none of the fitted geographies has rows in the held-out estimates",
        ));
    }

    let mut scored = Vec::new();
    for f in &features {
        let label = f.label();
        let in_fit = stored.iter().any(|s| s.contains_key(&label));
        let in_held = held.iter().flatten().any(|t| held_out_value(t, f).is_some());
        match (in_fit, in_held) {
            (false, false) => {
                return Err(CliError::invalid(format!(
                    "feature '{label}' appears in neither the fit's feature summaries nor the held-out estimates; \
                     add it to the fit's predictive features or supply held-out rows for it"
                )))
            }
            (false, true) => warn!("feature '{label}' was not predicted by the fit; skipped"),
            (true, false) => warn!("feature '{label}' has no held-out estimates; skipped"),
            (true, true) => {}
        }
        scored.push(*f);
    }

    // (estimator, feature label) -> (estimates, truths)
    let estimators = ["posterior mean", "posterior median", "PRLN"];
    let mut pairs: BTreeMap<(usize, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut intervals: BTreeMap<String, (Vec<(f64, f64)>, Vec<f64>)> = BTreeMap::new();
    for ((g, s), t) in fit.geos.iter().zip(&stored).zip(&held) {
        let Some(t) = t else { continue };
        for f in &scored {
            let label = f.label();
            let Some(truth) = held_out_value(t, f) else { continue };
            if let Some(sum) = s.get(&label) {
                for (e, v) in [(0, sum.mean), (1, sum.median)] {
                    let p = pairs.entry((e, label.clone())).or_default();
                    p.0.push(v);
                    p.1.push(truth);
                }
                let c = intervals.entry(label.clone()).or_default();
                c.0.push((sum.lower, sum.upper));
                c.1.push(truth);
            }
            if let Some(v) = prln.as_ref().and_then(|p| p.get(&(g.geo_id.clone(), label.clone()))) {
                let p = pairs.entry((2, label.clone())).or_default();
                p.0.push(*v);
                p.1.push(truth);
            }
        }
    }
    let labels: Vec<String> = scored.iter().map(Feature::label).collect();
    let mut header = vec!["metric".to_string(), "estimator".to_string()];
    header.extend(labels.iter().cloned());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let n_estimators = if prln.is_some() { 3 } else { 2 };
    let mut metric_rows = Vec::new();
    for name in METRIC_NAMES {
        for (e, est_name) in estimators.iter().enumerate().take(n_estimators) {
            let mut row = vec![name.to_string(), est_name.to_string()];
            for l in &labels {
                let v = pairs
                    .get(&(e, l.clone()))
                    .and_then(|(a, b)| metrics(a, b).ok())
                    .and_then(|m| metric_value(&m, name));
                row.push(fmt_opt(v));
            }
            metric_rows.push(row);
        }
    }
    let coverage_rows: Vec<Vec<String>> = labels
        .iter()
        .map(|l| {
            let (iv, truth) = intervals.get(l).cloned().unwrap_or_default();
            vec![l.clone(), fmt_opt(coverage(&iv, &truth).ok()), iv.len().to_string()]
        })
        .collect();

    let mut heldout_terms: Vec<(String, String, Option<EstimateRecord>, usize)> = Vec::new();
    let mut types: Vec<String> = Vec::new();
    let mut per_geo: Vec<Vec<(String, EstimateRecord)>> = Vec::new();
    for t in &held {
        let recs = match t {
            Some(t) => held_out_records(t, &cfg.heldout_quantiles)?,
            None => Vec::new(),
        };
        for (l, _) in &recs {
            if !types.contains(l) {
                types.push(l.clone());
            }
        }
        per_geo.push(recs);
    }
    for (i, (g, recs)) in fit.geos.iter().zip(&per_geo).enumerate() {
        for ty in &types {
            let rec = recs.iter().find(|(l, _)| l == ty).map(|(_, r)| *r);
            heldout_terms.push((g.geo_id.clone(), ty.clone(), rec, i));
        }
    }
    let mut dens_cache: BTreeMap<usize, Vec<popinterp::density::PiecewiseDensity>> = BTreeMap::new();
    let mut terms = Vec::new();
    for (area, ty, rec, i) in heldout_terms {
        let loglik = match rec {
            Some(rec) => {
                if !dens_cache.contains_key(&i) {
                    dens_cache.insert(i, fit.densities(&fit.geos[i], draws_used)?);
                }
                Some(record_log_likelihood(&dens_cache[&i], &rec))
            }
            None => None,
        };
        terms.push(WaicTerm {
            area,
            estimate_type: ty,
            loglik,
        });
    }
    let heldout = waic_or_empty(&terms)?;
    drop(dens_cache);
    let mut insample_terms = Vec::new();
    for g in &fit.geos {
        insample_terms.extend(in_sample_terms(&fit, g, draws_used)?);
    }
    let insample = waic_or_empty(&insample_terms)?;

    let mut out = OutputDir::create(out_dir)?;
    out.write(METRICS_FILE, &csv_bytes(&header, metric_rows)?)?;
    out.write(COVERAGE_FILE, &csv_bytes(&["feature", "coverage", "n"], coverage_rows)?)?;
    out.write(WAIC_HELDOUT_FILE, &waic_table(&heldout, &cfg.label)?)?;
    out.write(WAIC_INSAMPLE_FILE, &waic_table(&insample, &cfg.label)?)?;
    let pointwise = [("heldout", &heldout), ("insample", &insample)]
        .into_iter()
        .flat_map(|(set, r)| {
            r.pointwise.iter().map(move |p| {
                vec![
                    set.to_string(),
                    p.area.clone(),
                    p.estimate_type.clone(),
                    fmt_num(p.waic.value),
                    fmt_num(p.waic.log_mean_density),
                    fmt_num(p.waic.variance),
                ]
            })
        });
    out.write(
        WAIC_POINTWISE_FILE,
        &csv_bytes(&["set", "area", "type", "waic", "log_mean_density", "variance"], pointwise)?,
    )?;
    let mut inputs = vec![hash_input("fit", &cfg.fit)?, hash_input("estimates", &cfg.estimates)?];
    if prln.is_some() {
        inputs.push(hash_input("prln", &cfg.prln)?);
    }
    out.finish(
        EvaluateConfig::NAME,
        0,
        cfg,
        inputs,
        serde_json::json!({
            "model": fit.model,
            "features": labels,
            "n_geos": fit.geos.len(),
            "n_heldout_terms": terms.iter().filter(|t| t.loglik.is_some()).count(),
        }),
    )
}
