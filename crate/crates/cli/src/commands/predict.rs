//! `predict`: posterior-predictive features from an existing fit.

use std::path::Path;

use popinterp::posterior_predictive::feature_posterior_from_densities;

use super::{feature_request, hash_input, require_path};
use crate::artifacts::{features_csv, per_draw_csv, LoadedFit, FEATURES_FILE, PER_DRAW_FILE};
use crate::config::{nonzero, CommandConfig, PredictConfig};
use crate::error::{CliError, Result};
use crate::output::{derive_seed, Manifest, OutputDir};

pub fn run(cfg: &PredictConfig, out_dir: &Path) -> Result<Manifest> {
    require_path("fit directory", &cfg.fit)?;
    let fit = LoadedFit::load(&cfg.fit)?;
    let geos: Vec<_> = if cfg.geo_ids.is_empty() {
        fit.geos.iter().collect()
    } else {
        cfg.geo_ids
            .iter()
            .map(|id| {
                fit.geo(id)
                    .ok_or_else(|| CliError::invalid(format!("{id} is not part of the fit")))
            })
            .collect::<Result<_>>()?
    };
    let mut out = OutputDir::create(out_dir)?;
    let mut rows = Vec::new();
    for g in geos {
        let req = feature_request(&cfg.predictive, g.population, derive_seed(cfg.seed, "predict", &g.geo_id))?;
        let densities = fit.densities(g, nonzero(cfg.predictive.draws_used))?;
        let req = popinterp::posterior_predictive::PopulationFeatureRequest {
            draws_used: None,
            ..req
        };
        let fp = feature_posterior_from_densities(&densities, &req)
            .map_err(|e| CliError::invalid(format!("{}: {e}", g.geo_id)))?;
        out.write(&format!("{}/{FEATURES_FILE}", g.dir), &features_csv(&fp)?)?;
        if cfg.predictive.per_draw {
            out.write(&format!("{}/{PER_DRAW_FILE}", g.dir), &per_draw_csv(&fp)?)?;
        }
        rows.push(serde_json::json!({
            "geo_id": g.geo_id,
            "dir": g.dir,
            "population": req.population,
            "n_draws": fp.n_draws,
            "size_floored": fp.size_floored,
        }));
    }
    out.finish(
        PredictConfig::NAME,
        cfg.seed,
        cfg,
        vec![hash_input("fit", &cfg.fit)?],
        serde_json::json!({ "geos": rows }),
    )
}
