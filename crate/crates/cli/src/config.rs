//! Per-command configuration. Each command reads one TOML file whose keys
//! default to the values in its template; `key=value` overrides from the
//! command line are applied on top.

use std::path::{Path, PathBuf};

use popinterp::model::{AlphaPrior, MedianOptions};
use popinterp::posterior_predictive::Feature;
use popinterp::sampler::{Init, MassMatrix, SamplerConfig};
use popinterp::synthpop::ACS_BREAKS;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::ingest::IngestOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_leapfrog: usize,
    pub mass_matrix: MassMatrix,
    /// Chains start uniformly on `[-init_radius, init_radius]` per coordinate.
    pub init_radius: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            chains: d.chains,
            warmup: d.warmup,
            draws: d.draws,
            target_accept: d.target_accept,
            max_leapfrog: d.max_leapfrog,
            mass_matrix: d.mass_matrix,
            init_radius: 2.0,
        }
    }
}

impl SamplerSettings {
    pub fn to_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            chains: self.chains,
            warmup: self.warmup,
            draws: self.draws,
            seed,
            target_accept: self.target_accept,
            max_leapfrog: self.max_leapfrog,
            mass_matrix: self.mass_matrix,
            init: Init::Uniform {
                radius: self.init_radius,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Estimate CSV holding the prior-centre bins; empty uses the bundled
    /// country-level table.
    pub centers: PathBuf,
    pub geo_id: String,
    pub scale: f64,
    pub alpha: AlphaPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            centers: PathBuf::new(),
            geo_id: "US".into(),
            scale: 0.1,
            alpha: AlphaPrior::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictiveSettings {
    pub features: Vec<String>,
    /// Population size; 0 takes it from the geography's population row, or
    /// `fallback_population` without one.
    pub population: usize,
    pub fallback_population: usize,
    /// Draw the population size from the population row's standard error.
    pub size_uncertainty: bool,
    /// Draws used, spread evenly; 0 uses all.
    pub draws_used: usize,
    pub interval_level: f64,
    /// Also write the per-draw feature matrix.
    pub per_draw: bool,
}

pub fn default_feature_labels() -> Vec<String> {
    let mut f: Vec<String> = (1..20).map(|i| format!("p{}", 5 * i)).collect();
    f.push("mean".into());
    f.push("gini".into());
    f
}

impl Default for PredictiveSettings {
    fn default() -> Self {
        Self {
            features: default_feature_labels(),
            population: 0,
            fallback_population: 1000,
            size_uncertainty: false,
            draws_used: 0,
            interval_level: 0.95,
            per_draw: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitTractConfig {
    pub estimates: PathBuf,
    /// Geographies to fit; empty fits all.
    pub geo_ids: Vec<String>,
    pub seed: u64,
    pub rhat_threshold: f64,
    pub ingest: IngestOptions,
    pub prior: PriorConfig,
    pub median: MedianOptions,
    pub sampler: SamplerSettings,
    pub predictive: PredictiveSettings,
}

impl Default for FitTractConfig {
    fn default() -> Self {
        Self {
            estimates: PathBuf::new(),
            geo_ids: Vec::new(),
            seed: 0,
            rhat_threshold: 1.1,
            ingest: IngestOptions::default(),
            prior: PriorConfig::default(),
            median: MedianOptions::default(),
            sampler: SamplerSettings::default(),
            predictive: PredictiveSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitNestedConfig {
    pub estimates: PathBuf,
    pub pums: PathBuf,
    /// Microdata areas to keep; empty keeps every record.
    pub puma_ids: Vec<String>,
    pub geo_ids: Vec<String>,
    pub seed: u64,
    pub rhat_threshold: f64,
    pub ingest: IngestOptions,
    pub prior: PriorConfig,
    pub median: MedianOptions,
    pub sampler: SamplerSettings,
    pub predictive: PredictiveSettings,
}

impl Default for FitNestedConfig {
    fn default() -> Self {
        let t = FitTractConfig::default();
        Self {
            estimates: PathBuf::new(),
            pums: PathBuf::new(),
            puma_ids: Vec::new(),
            geo_ids: Vec::new(),
            seed: 0,
            rhat_threshold: t.rhat_threshold,
            ingest: t.ingest,
            prior: t.prior,
            median: t.median,
            sampler: t.sampler,
            predictive: t.predictive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrlnConfig {
    pub estimates: PathBuf,
    pub geo_ids: Vec<String>,
    /// Locate the median bin from the median row when there is one.
    pub use_median: bool,
    pub features: Vec<String>,
    pub ingest: IngestOptions,
}

impl Default for PrlnConfig {
    fn default() -> Self {
        Self {
            estimates: PathBuf::new(),
            geo_ids: Vec::new(),
            use_median: true,
            features: default_feature_labels(),
            ingest: IngestOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub seed: u64,
    /// Microdata CSV (`income, weight, puma_id`) used as the reference
    /// sample; empty generates one.
    pub reference: PathBuf,
    pub reference_strata: usize,
    pub reference_households: usize,
    pub n_tracts: usize,
    pub n_reps: usize,
    pub sampling_fraction: f64,
    pub n_replicates: usize,
    pub breaks: Vec<f64>,
    pub prior_scale: f64,
    /// Posterior draws used for predictive features; 0 uses all.
    pub draws_used: usize,
    pub interval_level: f64,
    pub sampler: SamplerSettings,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reference: PathBuf::new(),
            reference_strata: 20,
            reference_households: 20000,
            n_tracts: 5,
            n_reps: 50,
            sampling_fraction: 0.1,
            n_replicates: 80,
            breaks: ACS_BREAKS.to_vec(),
            prior_scale: 0.1,
            draws_used: 400,
            interval_level: 0.95,
            sampler: SamplerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Output directory of `fit-tract` or `fit-nested`.
    pub fit: PathBuf,
    pub geo_ids: Vec<String>,
    pub seed: u64,
    pub predictive: PredictiveSettings,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            fit: PathBuf::new(),
            geo_ids: Vec::new(),
            seed: 0,
            predictive: PredictiveSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub fit: PathBuf,
    /// Estimate CSV holding the held-out rows.
    pub estimates: PathBuf,
    /// Output directory of `prln`; empty leaves PRLN out of the tables.
    pub prln: PathBuf,
    /// Model name used in the WAIC tables.
    pub label: String,
    /// Features scored against held-out estimates.
    pub features: Vec<String>,
    /// Quantile rows at these levels are held out, as are rows flagged
    /// `held_out`.
    pub heldout_quantiles: Vec<f64>,
    /// Draws used for WAIC, spread evenly; 0 uses all.
    pub draws_used: usize,
    pub ingest: IngestOptions,
}

pub fn default_heldout_quantiles() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 0.95]
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            fit: PathBuf::new(),
            estimates: PathBuf::new(),
            prln: PathBuf::new(),
            label: "model".into(),
            features: vec![
                "p20".into(),
                "p40".into(),
                "p60".into(),
                "p80".into(),
                "p95".into(),
                "gini".into(),
            ],
            heldout_quantiles: default_heldout_quantiles(),
            draws_used: 0,
            ingest: IngestOptions::default(),
        }
    }
}

/// Parses `p<percent>`, `mean` or `gini`.
pub fn parse_feature(label: &str) -> Result<Feature> {
    let s = label.trim().to_ascii_lowercase();
    match s.as_str() {
        "mean" => return Ok(Feature::Mean),
        "gini" => return Ok(Feature::Gini),
        _ => {}
    }
    let pct: Option<f64> = s.strip_prefix('p').and_then(|p| p.parse().ok());
    match pct {
        Some(p) if p > 0.0 && p < 100.0 => Ok(Feature::Percentile { tau: p / 100.0 }),
        _ => Err(CliError::invalid(format!(
            "unknown feature '{label}'; use p<percent>, mean or gini"
        ))),
    }
}

pub fn parse_features(labels: &[String]) -> Result<Vec<Feature>> {
    if labels.is_empty() {
        return Err(CliError::invalid("no features requested"));
    }
    labels.iter().map(|l| parse_feature(l)).collect()
}

/// Optional count where 0 means "no limit".
pub fn nonzero(n: usize) -> Option<usize> {
    (n > 0).then_some(n)
}

/// A command's configuration type.
pub trait CommandConfig: Serialize + DeserializeOwned + Default {
    const NAME: &'static str;
    /// Commented TOML listing every key at its default.
    const TEMPLATE: &'static str;
    /// Path fields, made absolute before a run.
    fn paths_mut(&mut self) -> Vec<&mut PathBuf>;
    fn seed(&self) -> u64;
}

fn abs(p: &mut PathBuf) -> Result<()> {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = std::path::absolute(&*p).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn override_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Splits `a.b.c=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::invalid(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Defaults, then the file, then the overrides. Relative paths are resolved
/// against the working directory.
pub fn load<C: CommandConfig>(file: Option<&Path>, overrides: &[(String, String)]) -> Result<C> {
    let mut value = toml::Value::try_from(C::default())
        .map_err(|e| CliError::invalid(format!("default {} config: {e}", C::NAME)))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(parsed));
    }
    for (key, raw) in overrides {
        let mut nested = override_value(raw);
        for part in key.rsplit('.') {
            let mut t = toml::Table::new();
            t.insert(part.to_string(), nested);
            nested = toml::Value::Table(t);
        }
        merge(&mut value, nested);
    }
    let mut cfg: C = value
        .try_into()
        .map_err(|e| CliError::invalid(format!("{} config: {e}", C::NAME)))?;
    for p in cfg.paths_mut() {
        abs(p)?;
    }
    Ok(cfg)
}

impl CommandConfig for FitTractConfig {
    const NAME: &'static str = "fit-tract";
    const TEMPLATE: &'static str = include_str!("../templates/fit-tract.toml");
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.estimates, &mut self.prior.centers]
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

impl CommandConfig for FitNestedConfig {
    const NAME: &'static str = "fit-nested";
    const TEMPLATE: &'static str = include_str!("../templates/fit-nested.toml");
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.estimates, &mut self.pums, &mut self.prior.centers]
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

impl CommandConfig for PrlnConfig {
    const NAME: &'static str = "prln";
    const TEMPLATE: &'static str = include_str!("../templates/prln.toml");
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.estimates]
    }
    fn seed(&self) -> u64 {
        0
    }
}

impl CommandConfig for SimulateConfig {
    const NAME: &'static str = "simulate";
    const TEMPLATE: &'static str = include_str!("../templates/simulate.toml");
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.reference]
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

impl CommandConfig for PredictConfig {
    const NAME: &'static str = "predict";
    const TEMPLATE: &'static str = include_str!("../templates/predict.toml");
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.fit]
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

impl CommandConfig for EvaluateConfig {
    const NAME: &'static str = "evaluate";
    const TEMPLATE: &'static str = include_str!("../templates/evaluate.toml");
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.fit, &mut self.estimates, &mut self.prln]
    }
    fn seed(&self) -> u64 {
        0
    }
}

/// The commented default configuration of a command.
pub fn template(command: &str) -> Option<&'static str> {
    Some(match command {
        "fit-tract" => FitTractConfig::TEMPLATE,
        "fit-nested" => FitNestedConfig::TEMPLATE,
        "prln" => PrlnConfig::TEMPLATE,
        "simulate" => SimulateConfig::TEMPLATE,
        "predict" => PredictConfig::TEMPLATE,
        "evaluate" => EvaluateConfig::TEMPLATE,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template_matches_default<C: CommandConfig + PartialEq + std::fmt::Debug>() {
        let parsed: C = toml::from_str(C::TEMPLATE).unwrap_or_else(|e| panic!("{}: {e}", C::NAME));
        assert_eq!(parsed, C::default(), "{}", C::NAME);
        // every key is spelled out: the template's key set equals the default's
        let keys = |v: &toml::Value| -> Vec<String> {
            fn walk(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
                if let toml::Value::Table(t) = v {
                    for (k, x) in t {
                        let p = format!("{prefix}{k}");
                        walk(x, &format!("{p}."), out);
                        out.push(p);
                    }
                }
            }
            let mut out = Vec::new();
            walk(v, "", &mut out);
            out.sort();
            out
        };
        let from_template: toml::Value = toml::from_str(C::TEMPLATE).unwrap();
        let from_default = toml::Value::try_from(C::default()).unwrap();
        assert_eq!(keys(&from_template), keys(&from_default), "{}", C::NAME);
    }

    #[test]
    fn templates_spell_out_the_defaults() {
        template_matches_default::<FitTractConfig>();
        template_matches_default::<FitNestedConfig>();
        template_matches_default::<PrlnConfig>();
        template_matches_default::<SimulateConfig>();
        template_matches_default::<PredictConfig>();
        template_matches_default::<EvaluateConfig>();
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 5\n[sampler]\nchains = 2\nwarmup = 10\n").unwrap();
        let cfg: FitTractConfig = load(
            Some(&path),
            &[
                ("sampler.warmup".into(), "20".into()),
                ("geo_ids".into(), "['a', 'b']".into()),
                ("prior.geo_id".into(), "MO".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.sampler.chains, 2);
        assert_eq!(cfg.sampler.warmup, 20);
        assert_eq!(cfg.sampler.draws, 4000);
        assert_eq!(cfg.geo_ids, vec!["a", "b"]);
        assert_eq!(cfg.prior.geo_id, "MO");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load::<FitTractConfig>(None, &[("sampler.chain".into(), "2".into())]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn feature_labels() {
        assert_eq!(parse_feature("p95").unwrap(), Feature::Percentile { tau: 0.95 });
        assert_eq!(parse_feature("Gini").unwrap(), Feature::Gini);
        assert!(parse_feature("p100").is_err());
        assert!(parse_feature("median").is_err());
        for l in default_feature_labels() {
            assert_eq!(parse_feature(&l).unwrap().label(), l);
        }
    }
}
