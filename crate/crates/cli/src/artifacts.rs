//! Files written by the fit commands and read back by `predict` and
//! `evaluate`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use popinterp::density::PiecewiseDensity;
use popinterp::model::{ModelSpec, NestedSpec};
use popinterp::posterior_predictive::{select_draws, FeaturePosterior, Summary};
use popinterp::sampler::{DiagnosticsReport, PosteriorDraws};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::output::{csv_bytes, fmt_num, fmt_opt, Manifest};

pub const DRAWS_FILE: &str = "draws.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const PER_DRAW_FILE: &str = "feature_draws.csv";
pub const PARAMETERS_FILE: &str = "parameters.csv";
pub const MODEL_FILE: &str = "model.json";

/// A geography's published household count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationRow {
    pub value: f64,
    pub se: f64,
}

/// The fitted model, enough to turn stored draws back into densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FittedModel {
    Tract {
        geo_id: String,
        spec: ModelSpec,
        population: Option<PopulationRow>,
    },
    Nested {
        geo_ids: Vec<String>,
        spec: NestedSpec,
        populations: Vec<Option<PopulationRow>>,
    },
}

/// Per-geography entry of a fit manifest's summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoEntry {
    pub geo_id: String,
    pub dir: String,
    pub n_likelihood_terms: usize,
    pub n_held_out: usize,
}

/// Summary block of a fit manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub model: String,
    pub geos: Vec<GeoEntry>,
    pub diagnostics_passed: bool,
    pub max_rhat: Option<f64>,
}

/// Diagnostics with the verdict applied to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub rhat_threshold: f64,
    pub max_rhat: Option<f64>,
    pub min_ess_bulk: Option<f64>,
    pub passed: bool,
    /// Why diagnostics could not be computed, if they could not.
    pub unavailable: Option<String>,
    pub report: Option<DiagnosticsReport>,
}

pub fn draws_csv(pd: &PosteriorDraws) -> Result<Vec<u8>> {
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend((0..pd.dim).map(|j| format!("theta_{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..pd.n_chains()).flat_map(|c| {
        (0..pd.n_draws).map(move |i| {
            let mut r = vec![c.to_string(), i.to_string()];
            r.extend(pd.draw(c, i).iter().map(|v| fmt_num(*v)));
            r
        })
    });
    csv_bytes(&header, rows)
}

/// Draws in file order (chain by chain).
pub fn read_draws(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let row = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        out.push(row);
    }
    Ok(out)
}

pub fn features_csv(fp: &FeaturePosterior) -> Result<Vec<u8>> {
    let rows = fp.results.iter().map(|r| {
        let s = r.summary;
        vec![
            r.feature.label(),
            fmt_opt(s.map(|s| s.mean)),
            fmt_opt(s.map(|s| s.median)),
            fmt_opt(s.map(|s| s.lower)),
            fmt_opt(s.map(|s| s.upper)),
            r.n_excluded.to_string(),
        ]
    });
    csv_bytes(&["feature", "mean", "median", "lower", "upper", "n_excluded"], rows)
}

pub fn per_draw_csv(fp: &FeaturePosterior) -> Result<Vec<u8>> {
    let mut header = vec!["draw".to_string()];
    header.extend(fp.results.iter().map(|r| r.feature.label()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = fp.per_draw.iter().enumerate().map(|(i, row)| {
        let mut r = vec![i.to_string()];
        r.extend(row.iter().map(|v| fmt_opt(*v)));
        r
    });
    csv_bytes(&header, rows)
}

/// Feature summaries keyed by label.
pub fn read_features(path: &Path) -> Result<BTreeMap<String, Summary>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let num = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok());
        if let (Some(mean), Some(median), Some(lower), Some(upper)) = (num(1), num(2), num(3), num(4)) {
            out.insert(
                rec.get(0).unwrap_or_default().to_string(),
                Summary {
                    mean,
                    median,
                    lower,
                    upper,
                },
            );
        }
    }
    Ok(out)
}

/// Posterior summaries of bin probabilities and Pareto shapes.
pub fn parameters_csv(densities: &[PiecewiseDensity], level: f64) -> Result<Vec<u8>> {
    let Some(first) = densities.first() else {
        return csv_bytes(&["parameter", "mean", "sd", "median", "lower", "upper"], Vec::<Vec<String>>::new());
    };
    let k = first.n_bins();
    let mut series: Vec<(String, Vec<f64>)> = (0..k).map(|j| (format!("p_{j}"), Vec::new())).collect();
    let pareto: Vec<usize> = (0..k).filter(|j| first.families()[*j].is_pareto()).collect();
    series.extend(pareto.iter().map(|j| (format!("alpha_{j}"), Vec::new())));
    for d in densities {
        for j in 0..k {
            series[j].1.push(d.probs()[j]);
        }
        for (i, j) in pareto.iter().enumerate() {
            series[k + i].1.push(d.families()[*j].alpha().unwrap_or(f64::NAN));
        }
    }
    let rows = series.iter().map(|(name, v)| {
        let s = Summary::from_values(v, level);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        vec![
            name.clone(),
            fmt_opt(s.map(|s| s.mean)),
            fmt_num(sd),
            fmt_opt(s.map(|s| s.median)),
            fmt_opt(s.map(|s| s.lower)),
            fmt_opt(s.map(|s| s.upper)),
        ]
    });
    csv_bytes(&["parameter", "mean", "sd", "median", "lower", "upper"], rows)
}

/// One geography of a loaded fit.
#[derive(Debug, Clone)]
pub struct LoadedGeo {
    pub geo_id: String,
    pub dir: String,
    pub spec: ModelSpec,
    pub population: Option<PopulationRow>,
    draws: Vec<Vec<f64>>,
    /// Offset of this tract's parameters within a nested draw.
    range: Option<std::ops::Range<usize>>,
}

/// A fit directory read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedFit {
    pub root: PathBuf,
    pub model: String,
    pub geos: Vec<LoadedGeo>,
    shared_draws: Vec<Vec<f64>>,
}

fn read_model(path: &Path) -> Result<FittedModel> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

impl LoadedFit {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(root)?;
        let summary: FitSummary = serde_json::from_value(manifest.summary.clone()).map_err(|_| {
            CliError::invalid(format!(
                "{} is the output of '{}', not a fit",
                root.display(),
                manifest.command
            ))
        })?;
        let mut geos = Vec::new();
        let mut shared_draws = Vec::new();
        match summary.model.as_str() {
            "tract" => {
                for g in &summary.geos {
                    let dir = root.join(&g.dir);
                    let (geo_id, spec, population) = match read_model(&dir.join(MODEL_FILE))? {
                        FittedModel::Tract {
                            geo_id,
                            spec,
                            population,
                        } => (geo_id, spec, population),
                        FittedModel::Nested { .. } => {
                            return Err(CliError::invalid(format!("{}: unexpected nested model", dir.display())))
                        }
                    };
                    geos.push(LoadedGeo {
                        geo_id,
                        dir: g.dir.clone(),
                        spec,
                        population,
                        draws: read_draws(&dir.join(DRAWS_FILE))?,
                        range: None,
                    });
                }
            }
            "nested" => {
                let FittedModel::Nested {
                    geo_ids,
                    spec,
                    populations,
                } = read_model(&root.join(MODEL_FILE))?
                else {
                    return Err(CliError::invalid(format!("{}: expected a nested model", root.display())));
                };
                shared_draws = read_draws(&root.join(DRAWS_FILE))?;
                for (r, (geo_id, population)) in geo_ids.into_iter().zip(populations).enumerate() {
                    let dir = summary
                        .geos
                        .iter()
                        .find(|g| g.geo_id == geo_id)
                        .map(|g| g.dir.clone())
                        .unwrap_or_else(|| crate::output::geo_dir_name(&geo_id));
                    geos.push(LoadedGeo {
                        geo_id,
                        dir,
                        spec: spec.tracts()[r].clone(),
                        population,
                        draws: Vec::new(),
                        range: Some(spec.range(r)),
                    });
                }
            }
            other => return Err(CliError::invalid(format!("unknown model '{other}' in {}", root.display()))),
        }
        Ok(Self {
            root: root.to_path_buf(),
            model: summary.model,
            geos,
            shared_draws,
        })
    }

    pub fn geo(&self, geo_id: &str) -> Option<&LoadedGeo> {
        self.geos.iter().find(|g| g.geo_id == geo_id)
    }

    /// Densities of up to `draws_used` draws, spread evenly.
    pub fn densities(&self, g: &LoadedGeo, draws_used: Option<usize>) -> Result<Vec<PiecewiseDensity>> {
        let all: Vec<&[f64]> = match &g.range {
            None => g.draws.iter().map(|d| d.as_slice()).collect(),
            Some(r) => self.shared_draws.iter().map(|d| &d[r.clone()]).collect(),
        };
        select_draws(all.len(), draws_used)
            .into_iter()
            .map(|i| {
                g.spec
                    .density_at(all[i])
                    .map_err(|e| CliError::invalid(format!("{}: {e}", g.geo_id)))
            })
            .collect()
    }

    /// Stored feature summaries of a geography.
    pub fn features(&self, g: &LoadedGeo) -> Result<BTreeMap<String, Summary>> {
        let p = self.root.join(&g.dir).join(FEATURES_FILE);
        if p.exists() {
            read_features(&p)
        } else {
            Ok(BTreeMap::new())
        }
    }
}
