//! One module per subcommand, plus what they share.

pub mod evaluate;
pub mod fit;
pub mod predict;
pub mod prln;
pub mod simulate;

use std::path::Path;

use popinterp::functionals::EstimateRecord;
use popinterp::model::TractEstimates;
use popinterp::posterior_predictive::PopulationFeatureRequest;

use crate::artifacts::PopulationRow;
use crate::config::{
    self, CommandConfig, EvaluateConfig, FitNestedConfig, FitTractConfig, PredictConfig,
    PredictiveSettings, PrlnConfig, SimulateConfig,
};
use crate::error::{CliError, Result};
use crate::ingest::{canonical_csv, parse_estimates, read_estimates, GeoTable, IngestOptions, RowKind};
use crate::output::{sha256_file, sha256_hex, InputHash, Manifest, OutputDir, MANIFEST_FILE};

pub const BUNDLED_PRIOR_CENTERS: &str = include_str!("../../data/us_prior_centers.csv");
const BUNDLED_PRIOR_PATH: &str = "bundled:us_prior_centers.csv";

/// Hash of an input file, or of a directory's manifest.
pub fn hash_input(role: &str, path: &Path) -> Result<InputHash> {
    let sha256 = if path.to_string_lossy() == BUNDLED_PRIOR_PATH {
        sha256_hex(BUNDLED_PRIOR_CENTERS.as_bytes())
    } else if path.is_dir() {
        sha256_file(&path.join(MANIFEST_FILE))?
    } else {
        sha256_file(path)?
    };
    Ok(InputHash {
        role: role.into(),
        path: path.display().to_string(),
        sha256,
    })
}

pub fn require_path(name: &str, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        Err(CliError::invalid(format!("no {name} given")))
    } else {
        Ok(())
    }
}

/// Prior-centre bins for `geo_id` from `path`, or from the bundled table.
pub fn prior_table(path: &Path, geo_id: &str, opts: &IngestOptions) -> Result<(GeoTable, InputHash)> {
    let (table, input) = if path.as_os_str().is_empty() {
        (
            parse_estimates(BUNDLED_PRIOR_CENTERS.as_bytes(), opts)?,
            hash_input("prior_centers", Path::new(BUNDLED_PRIOR_PATH))?,
        )
    } else {
        (read_estimates(path, opts)?, hash_input("prior_centers", path)?)
    };
    let geo = table.select(&[geo_id.to_string()])?.remove(0).clone();
    if geo.bins().next().is_none() {
        return Err(CliError::invalid(format!("prior geography {geo_id} has no bin rows")));
    }
    Ok((geo, input))
}

/// Prior-centre shares coarsened to the tract's bins. Every tract knot must
/// also be a knot of the prior table.
pub fn prior_center(prior: &GeoTable, tract: &GeoTable) -> Result<Vec<f64>> {
    let shares = prior.bin_shares();
    let prior_edges = prior.bin_edges();
    let tract_edges = tract.bin_edges();
    let mut center = vec![0.0; tract_edges.len()];
    for ((lo, hi), s) in prior_edges.iter().zip(&shares) {
        let k = tract_edges
            .iter()
            .position(|(a, b)| a <= lo && hi <= b)
            .ok_or_else(|| {
                CliError::invalid(format!(
                    "{}: prior bin [{lo}, {hi}) of {} straddles a tract knot; the prior table must use the tract's knots or finer ones",
                    tract.geo_id, prior.geo_id
                ))
            })?;
        center[k] += s;
    }
    Ok(center)
}

/// Likelihood inputs of a geography and the number of rows kept out.
pub fn tract_estimates(t: &GeoTable) -> Result<(TractEstimates, usize)> {
    let bins = t.bin_records()?;
    if bins.is_empty() {
        return Err(CliError::invalid(format!("{}: no bin rows", t.geo_id)));
    }
    let used = |k: RowKind| t.find(k).filter(|r| !r.held_out);
    let mean = used(RowKind::Mean)
        .map(|r| EstimateRecord::mean(r.value, r.se))
        .transpose()
        .map_err(|e| CliError::invalid(format!("{}: {e}", t.geo_id)))?;
    let median = used(RowKind::Median)
        .ok_or_else(|| CliError::invalid(format!("{}: a median row is required to fit", t.geo_id)))
        .and_then(|r| {
            EstimateRecord::quantile(0.5, r.value, r.se)
                .map_err(|e| CliError::invalid(format!("{}: {e}", t.geo_id)))
        })?;
    let n_used = bins.len() + usize::from(mean.is_some()) + 1;
    let n_rows = t.rows.iter().filter(|r| r.kind != RowKind::Population).count();
    Ok((TractEstimates { bins, mean, median }, n_rows - n_used))
}

pub fn population_row(t: &GeoTable) -> Option<PopulationRow> {
    t.find(RowKind::Population).map(|r| PopulationRow {
        value: r.value,
        se: r.se,
    })
}

pub fn feature_request(
    p: &PredictiveSettings,
    population: Option<PopulationRow>,
    seed: u64,
) -> Result<PopulationFeatureRequest> {
    let n = if p.population > 0 {
        p.population
    } else {
        population.map_or(p.fallback_population, |r| r.value.round().max(1.0) as usize)
    };
    let size_se = if p.size_uncertainty {
        Some(population.map(|r| r.se).ok_or_else(|| {
            CliError::invalid("size_uncertainty needs a population row with a standard error")
        })?)
    } else {
        None
    };
    Ok(PopulationFeatureRequest {
        features: config::parse_features(&p.features)?,
        population: n,
        size_se,
        draws_used: config::nonzero(p.draws_used),
        interval_level: p.interval_level,
        seed,
    })
}

/// Validates an estimate CSV and writes its canonical form. Fails after
/// writing if any geography was rejected.
pub fn run_ingest(estimates: &Path, out_dir: &Path) -> Result<Manifest> {
    let table = read_estimates(estimates, &IngestOptions::default())?;
    let mut out = OutputDir::create(out_dir)?;
    out.write("estimates.csv", &canonical_csv(&table)?)?;
    let manifest = out.finish(
        "ingest",
        0,
        &serde_json::json!({ "estimates": estimates }),
        vec![hash_input("estimates", estimates)?],
        serde_json::json!({
            "accepted": table.geos.keys().collect::<Vec<_>>(),
            "rejected": table.rejected,
        }),
    )?;
    if table.rejected.is_empty() {
        Ok(manifest)
    } else {
        let reasons: Vec<String> = table.rejected.iter().map(|(g, r)| format!("{g}: {r}")).collect();
        Err(CliError::invalid(format!("rejected {}", reasons.join("; "))))
    }
}

/// Reruns the command recorded in `manifest`, after checking that its
/// inputs are unchanged.
pub fn rerun(manifest: &Manifest, out: &Path) -> Result<Manifest> {
    if manifest.tool != "popinterp" {
        return Err(CliError::invalid(format!("manifest from unknown tool '{}'", manifest.tool)));
    }
    if manifest.version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest written by version {}, running {}",
            manifest.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    for input in &manifest.inputs {
        let now = hash_input(&input.role, Path::new(&input.path))?;
        if now.sha256 != input.sha256 {
            return Err(CliError::invalid(format!(
                "input {} ({}) has changed since the manifest was written",
                input.role, input.path
            )));
        }
    }
    fn cfg<C: CommandConfig>(v: &serde_json::Value) -> Result<C> {
        serde_json::from_value(v.clone())
            .map_err(|e| CliError::invalid(format!("{} config in manifest: {e}", C::NAME)))
    }
    let v = &manifest.config;
    match manifest.command.as_str() {
        "fit-tract" => fit::run_tract(&cfg::<FitTractConfig>(v)?, out),
        "fit-nested" => fit::run_nested(&cfg::<FitNestedConfig>(v)?, out),
        "prln" => prln::run(&cfg::<PrlnConfig>(v)?, out),
        "simulate" => simulate::run(&cfg::<SimulateConfig>(v)?, out),
        "predict" => predict::run(&cfg::<PredictConfig>(v)?, out),
        "evaluate" => evaluate::run(&cfg::<EvaluateConfig>(v)?, out),
        "ingest" => {
            let path = v
                .get("estimates")
                .and_then(|p| p.as_str())
                .ok_or_else(|| CliError::invalid("ingest manifest without an estimates path"))?;
            run_ingest(Path::new(path), out)
        }
        other => Err(CliError::invalid(format!("manifest names unknown command '{other}'"))),
    }
}
