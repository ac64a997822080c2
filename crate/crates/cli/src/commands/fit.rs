//! `fit-tract` and `fit-nested`.

use std::collections::BTreeSet;
use std::path::Path;

use log::{info, warn};
use popinterp::density::PiecewiseDensity;
use popinterp::model::{build_spec, ModelSpec, NestedSpec, PriorSettings, PumsObservation};
use popinterp::posterior_predictive::{feature_posterior_from_densities, select_draws, FeaturePosterior};
use popinterp::sampler::{diagnostics, run_hmc, LogDensity, PosteriorDraws, SamplerConfig, SamplerError};
use rayon::prelude::*;

use super::{
    feature_request, hash_input, population_row, prior_center, prior_table, require_path,
    tract_estimates,
};
use crate::artifacts::{
    draws_csv, features_csv, parameters_csv, per_draw_csv, DiagnosticsFile, FitSummary,
    FittedModel, GeoEntry, PopulationRow, DIAGNOSTICS_FILE, DRAWS_FILE, FEATURES_FILE, MODEL_FILE,
    PARAMETERS_FILE, PER_DRAW_FILE,
};
use crate::config::{CommandConfig, FitNestedConfig, FitTractConfig, PredictiveSettings};
use crate::error::{CliError, Result};
use crate::ingest::{read_estimates, read_pums, GeoTable};
use crate::output::{derive_seed, geo_dir_name, Manifest, OutputDir};

/// A geography's model and its likelihood bookkeeping.
struct Prepared {
    geo_id: String,
    dir: String,
    spec: ModelSpec,
    population: Option<PopulationRow>,
    n_held_out: usize,
}

fn prepare(
    tables: &[&GeoTable],
    prior: &GeoTable,
    cfg_prior: &crate::config::PriorConfig,
    median: popinterp::model::MedianOptions,
) -> Result<Vec<Prepared>> {
    let mut dirs = BTreeSet::new();
    tables
        .iter()
        .map(|t| {
            let dir = geo_dir_name(&t.geo_id);
            if !dirs.insert(dir.clone()) {
                return Err(CliError::invalid(format!(
                    "geo_ids collide in output directory name '{dir}'"
                )));
            }
            let (est, n_held_out) = tract_estimates(t)?;
            let mut settings = PriorSettings::new(prior_center(prior, t)?, cfg_prior.scale);
            settings.alpha = cfg_prior.alpha;
            let spec = build_spec(&est, settings, median)
                .map_err(|e| CliError::invalid(format!("{}: {e}", t.geo_id)))?;
            Ok(Prepared {
                geo_id: t.geo_id.clone(),
                dir,
                spec,
                population: population_row(t),
                n_held_out,
            })
        })
        .collect()
}

fn sample<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig, what: &str) -> Result<PosteriorDraws> {
    run_hmc(target, cfg).map_err(|e| match e {
        SamplerError::Config(m) => CliError::invalid(format!("{what}: {m}")),
        other => CliError::Diagnostics(format!("{what}: {other}")),
    })
}

fn assess(pd: &PosteriorDraws, threshold: f64) -> DiagnosticsFile {
    match diagnostics(pd) {
        Ok(report) => {
            let max_rhat = report.max_rhat();
            DiagnosticsFile {
                rhat_threshold: threshold,
                max_rhat,
                min_ess_bulk: report.min_ess_bulk(),
                passed: max_rhat.is_none_or(|r| r <= threshold),
                unavailable: None,
                report: Some(report),
            }
        }
        Err(e) => {
            warn!("diagnostics unavailable: {e}");
            DiagnosticsFile {
                rhat_threshold: threshold,
                max_rhat: None,
                min_ess_bulk: None,
                passed: true,
                unavailable: Some(e.to_string()),
                report: None,
            }
        }
    }
}

/// Densities of every draw and the predictive features.
fn predictive(
    densities: &[PiecewiseDensity],
    settings: &PredictiveSettings,
    population: Option<PopulationRow>,
    seed: u64,
) -> Result<FeaturePosterior> {
    let req = feature_request(settings, population, seed)?;
    let chosen: Vec<PiecewiseDensity> = select_draws(densities.len(), req.draws_used)
        .into_iter()
        .map(|i| densities[i].clone())
        .collect();
    let req = popinterp::posterior_predictive::PopulationFeatureRequest {
        draws_used: None,
        ..req
    };
    feature_posterior_from_densities(&chosen, &req).map_err(|e| CliError::invalid(e.to_string()))
}

fn write_features(
    out: &mut OutputDir,
    dir: &str,
    fp: &FeaturePosterior,
    densities: &[PiecewiseDensity],
    settings: &PredictiveSettings,
) -> Result<()> {
    out.write(&format!("{dir}/{FEATURES_FILE}"), &features_csv(fp)?)?;
    out.write(
        &format!("{dir}/{PARAMETERS_FILE}"),
        &parameters_csv(densities, settings.interval_level)?,
    )?;
    if settings.per_draw {
        out.write(&format!("{dir}/{PER_DRAW_FILE}"), &per_draw_csv(fp)?)?;
    }
    Ok(())
}

fn all_densities<F>(pd: &PosteriorDraws, f: F) -> Result<Vec<PiecewiseDensity>>
where
    F: Fn(&[f64]) -> std::result::Result<PiecewiseDensity, popinterp::model::ModelError> + Sync,
{
    let draws: Vec<&[f64]> = pd.iter_draws().collect();
    draws
        .par_iter()
        .map(|d| f(d).map_err(|e| CliError::invalid(e.to_string())))
        .collect()
}

fn diagnostics_error(failed: &[(String, Option<f64>)], threshold: f64) -> CliError {
    let list: Vec<String> = failed
        .iter()
        .map(|(g, r)| format!("{g} (max R-hat {})", r.map_or("n/a".into(), |r| format!("{r:.3}"))))
        .collect();
    CliError::Diagnostics(format!(
        "R-hat above {threshold} for {}; outputs were written",
        list.join(", ")
    ))
}

struct TractFit {
    draws: PosteriorDraws,
    diag: DiagnosticsFile,
    densities: Vec<PiecewiseDensity>,
    features: FeaturePosterior,
}

pub fn run_tract(cfg: &FitTractConfig, out_dir: &Path) -> Result<Manifest> {
    require_path("estimates file", &cfg.estimates)?;
    let table = read_estimates(&cfg.estimates, &cfg.ingest)?;
    let geos = table.select(&cfg.geo_ids)?;
    let (prior, prior_input) = prior_table(&cfg.prior.centers, &cfg.prior.geo_id, &cfg.ingest)?;
    let prepared = prepare(&geos, &prior, &cfg.prior, cfg.median)?;
    let fits = prepared
        .par_iter()
        .map(|p| {
            info!("{}: sampling {} parameters", p.geo_id, p.spec.dim());
            let sampler = cfg.sampler.to_config(derive_seed(cfg.seed, "sampler", &p.geo_id));
            let draws = sample(&p.spec, &sampler, &p.geo_id)?;
            let diag = assess(&draws, cfg.rhat_threshold);
            let densities = all_densities(&draws, |t| p.spec.density_at(t))?;
            let features = predictive(
                &densities,
                &cfg.predictive,
                p.population,
                derive_seed(cfg.seed, "predictive", &p.geo_id),
            )?;
            Ok(TractFit {
                draws,
                diag,
                densities,
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = OutputDir::create(out_dir)?;
    let mut entries = Vec::new();
    let mut failed = Vec::new();
    let mut max_rhat: Option<f64> = None;
    for (p, f) in prepared.iter().zip(&fits) {
        let d = &p.dir;
        out.write(&format!("{d}/{DRAWS_FILE}"), &draws_csv(&f.draws)?)?;
        out.write_json(&format!("{d}/{DIAGNOSTICS_FILE}"), &f.diag)?;
        write_features(&mut out, d, &f.features, &f.densities, &cfg.predictive)?;
        out.write_json(
            &format!("{d}/{MODEL_FILE}"),
            &FittedModel::Tract {
                geo_id: p.geo_id.clone(),
                spec: p.spec.clone(),
                population: p.population,
            },
        )?;
        if !f.diag.passed {
            failed.push((p.geo_id.clone(), f.diag.max_rhat));
        }
        max_rhat = match (max_rhat, f.diag.max_rhat) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        entries.push(GeoEntry {
            geo_id: p.geo_id.clone(),
            dir: d.clone(),
            n_likelihood_terms: p.spec.n_likelihood_terms(),
            n_held_out: p.n_held_out,
        });
    }
    let summary = FitSummary {
        model: "tract".into(),
        geos: entries,
        diagnostics_passed: failed.is_empty(),
        max_rhat,
    };
    let inputs = vec![hash_input("estimates", &cfg.estimates)?, prior_input];
    let manifest = out.finish(
        FitTractConfig::NAME,
        cfg.seed,
        cfg,
        inputs,
        serde_json::to_value(&summary).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    if failed.is_empty() {
        Ok(manifest)
    } else {
        Err(diagnostics_error(&failed, cfg.rhat_threshold))
    }
}

pub fn run_nested(cfg: &FitNestedConfig, out_dir: &Path) -> Result<Manifest> {
    require_path("estimates file", &cfg.estimates)?;
    require_path("microdata file", &cfg.pums)?;
    let table = read_estimates(&cfg.estimates, &cfg.ingest)?;
    let geos = table.select(&cfg.geo_ids)?;
    let (prior, prior_input) = prior_table(&cfg.prior.centers, &cfg.prior.geo_id, &cfg.ingest)?;
    let prepared = prepare(&geos, &prior, &cfg.prior, cfg.median)?;

    let pums: Vec<PumsObservation> = read_pums(&cfg.pums)?
        .into_iter()
        .filter(|r| cfg.puma_ids.is_empty() || cfg.puma_ids.contains(&r.puma_id))
        .map(|r| PumsObservation {
            z: r.income,
            weight: r.weight,
        })
        .collect();
    if pums.is_empty() {
        return Err(CliError::invalid("no microdata records left after filtering by puma_ids"));
    }
    let mixing: Vec<f64> = if prepared.iter().all(|p| p.population.is_some()) {
        prepared.iter().map(|p| p.population.map_or(1.0, |r| r.value)).collect()
    } else {
        warn!("not every tract has a population row; using equal mixing weights");
        vec![1.0; prepared.len()]
    };
    let spec = NestedSpec::new(
        prepared.iter().map(|p| p.spec.clone()).collect(),
        mixing,
        pums,
    )
    .map_err(|e| CliError::invalid(e.to_string()))?;
    info!(
        "nested model: {} tracts, {} records, {} parameters",
        prepared.len(),
        spec.observations().len(),
        spec.dim()
    );
    let draws = sample(&spec, &cfg.sampler.to_config(derive_seed(cfg.seed, "sampler", "")), "nested")?;
    let diag = assess(&draws, cfg.rhat_threshold);

    let mut out = OutputDir::create(out_dir)?;
    out.write(DRAWS_FILE, &draws_csv(&draws)?)?;
    out.write_json(DIAGNOSTICS_FILE, &diag)?;
    let mut entries = Vec::new();
    for (r, p) in prepared.iter().enumerate() {
        let range = spec.range(r);
        let tract = &spec.tracts()[r];
        let densities = all_densities(&draws, |t| tract.density_at(&t[range.clone()]))?;
        let fp = predictive(
            &densities,
            &cfg.predictive,
            p.population,
            derive_seed(cfg.seed, "predictive", &p.geo_id),
        )?;
        write_features(&mut out, &p.dir, &fp, &densities, &cfg.predictive)?;
        entries.push(GeoEntry {
            geo_id: p.geo_id.clone(),
            dir: p.dir.clone(),
            n_likelihood_terms: p.spec.n_likelihood_terms(),
            n_held_out: p.n_held_out,
        });
    }
    out.write_json(
        MODEL_FILE,
        &FittedModel::Nested {
            geo_ids: prepared.iter().map(|p| p.geo_id.clone()).collect(),
            spec,
            populations: prepared.iter().map(|p| p.population).collect(),
        },
    )?;
    let summary = FitSummary {
        model: "nested".into(),
        geos: entries,
        diagnostics_passed: diag.passed,
        max_rhat: diag.max_rhat,
    };
    let inputs = vec![
        hash_input("estimates", &cfg.estimates)?,
        hash_input("pums", &cfg.pums)?,
        prior_input,
    ];
    let manifest = out.finish(
        FitNestedConfig::NAME,
        cfg.seed,
        cfg,
        inputs,
        serde_json::to_value(&summary).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    if diag.passed {
        Ok(manifest)
    } else {
        Err(diagnostics_error(&[("nested".into(), diag.max_rhat)], cfg.rhat_threshold))
    }
}
