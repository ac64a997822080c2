//! `prln`: the Pareto-linear baseline, point estimates only.

use std::path::Path;

use log::warn;
use popinterp::prln::{prln_features, prln_fit, PrlnFit};
use serde::{Deserialize, Serialize};

use super::{hash_input, require_path};
use crate::config::{parse_features, CommandConfig, PrlnConfig};
use crate::error::{CliError, Result};
use crate::ingest::{read_estimates, RowKind};
use crate::output::{csv_bytes, fmt_opt, Manifest, OutputDir};

pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const FITS_FILE: &str = "fits.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoPrln {
    pub geo_id: String,
    pub fit: PrlnFit,
}

pub fn run(cfg: &PrlnConfig, out_dir: &Path) -> Result<Manifest> {
    require_path("estimates file", &cfg.estimates)?;
    let features = parse_features(&cfg.features)?;
    let table = read_estimates(&cfg.estimates, &cfg.ingest)?;
    let geos = table.select(&cfg.geo_ids)?;
    let mut fits = Vec::new();
    let mut rows = Vec::new();
    let mut n_fallbacks = 0;
    for t in geos {
        let bins = t.bin_records()?;
        let hint = if cfg.use_median {
            t.find(RowKind::Median).map(|r| r.value)
        } else {
            None
        };
        let fit = prln_fit(&bins, hint).map_err(|e| CliError::invalid(format!("{}: {e}", t.geo_id)))?;
        for f in &fit.fallbacks {
            warn!(
                "{}: bin {} fallback {:?} (shape estimate {:?})",
                t.geo_id, f.bin, f.rule, f.alpha_hat
            );
        }
        n_fallbacks += fit.fallbacks.len();
        for (f, v) in prln_features(&fit, &features) {
            rows.push(vec![t.geo_id.clone(), f.label(), fmt_opt(v)]);
        }
        fits.push(GeoPrln {
            geo_id: t.geo_id.clone(),
            fit,
        });
    }
    let mut out = OutputDir::create(out_dir)?;
    out.write(ESTIMATES_FILE, &csv_bytes(&["geo_id", "feature", "value"], rows)?)?;
    out.write_json(FITS_FILE, &fits)?;
    out.finish(
        PrlnConfig::NAME,
        0,
        cfg,
        vec![hash_input("estimates", &cfg.estimates)?],
        serde_json::json!({ "n_geos": fits.len(), "n_fallbacks": n_fallbacks }),
    )
}

/// `(geo_id, feature label) -> value` from a `prln` output directory.
pub fn read_estimates_file(dir: &Path) -> Result<std::collections::BTreeMap<(String, String), f64>> {
    let path = dir.join(ESTIMATES_FILE);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::io(&path, e))?;
    let mut out = std::collections::BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(&path, e))?;
        if let Some(v) = rec.get(2).and_then(|s| s.parse::<f64>().ok()) {
            out.insert(
                (rec.get(0).unwrap_or_default().to_string(), rec.get(1).unwrap_or_default().to_string()),
                v,
            );
        }
    }
    Ok(out)
}
