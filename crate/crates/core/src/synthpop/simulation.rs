//! The repeated-sampling experiment: sample, estimate directly, fit the tract
//! model and PRLN, and compare every estimator with the population truth.
//!
//! Replication `i` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `i`;
//! sampler and predictive seeds come from that stream, so the report does not
//! depend on scheduling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::direct::{direct_estimates_with_sdr, Estimate, TractDirect, ACS_BREAKS};
use super::sample::stratified_sample;
use super::{ReferenceSample, SynthError, SyntheticWorld};
use crate::eval::{metrics, Metrics};
use crate::functionals::EstimateRecord;
use crate::model::{build_spec, MedianOptions, PriorSettings, TractEstimates};
use crate::posterior_predictive::{
    feature_posterior, finite_population_feature, Feature, PopulationFeatureRequest, Summary,
};
use crate::prln::{prln_features, prln_fit};
use crate::sampler::{chain_rng, run_hmc, SamplerConfig};
use crate::stats::{mean, sample_variance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_reps: usize,
    pub sampling_fraction: f64,
    pub n_replicates: usize,
    pub breaks: Vec<f64>,
    /// Dirichlet scale `t`.
    pub prior_scale: f64,
    pub sampler: SamplerConfig,
    /// Posterior draws used for predictive features; `None` uses all.
    pub draws_used: Option<usize>,
    pub interval_level: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_reps: 50,
            sampling_fraction: 0.1,
            n_replicates: 80,
            breaks: ACS_BREAKS.to_vec(),
            prior_scale: 0.1,
            sampler: SamplerConfig::default(),
            draws_used: Some(400),
            interval_level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Direct,
    PosteriorMean,
    PosteriorMedian,
    Prln,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Direct,
        Estimator::PosteriorMean,
        Estimator::PosteriorMedian,
        Estimator::Prln,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Direct => "Direct",
            Estimator::PosteriorMean => "P. Mean",
            Estimator::PosteriorMedian => "P. Median",
            Estimator::Prln => "PRLN",
        }
    }
}

/// Everything recorded for one feature of one tract in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub rep: usize,
    pub tract: usize,
    pub feature: Feature,
    pub truth: f64,
    pub direct: Option<f64>,
    pub posterior: Option<Summary>,
    pub prln: Option<f64>,
}

impl FeatureRecord {
    pub fn estimate(&self, e: Estimator) -> Option<f64> {
        match e {
            Estimator::Direct => self.direct,
            Estimator::PosteriorMean => self.posterior.map(|s| s.mean),
            Estimator::PosteriorMedian => self.posterior.map(|s| s.median),
            Estimator::Prln => self.prln,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinRecord {
    pub rep: usize,
    pub tract: usize,
    pub bin: usize,
    pub estimate: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub rep: usize,
    pub tract: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub feature: Feature,
    pub estimator: Estimator,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub feature: Feature,
    pub vs_truth: Option<f64>,
    pub vs_prln: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinBias {
    pub bin: usize,
    pub mean_error: f64,
    pub mc_se: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub n_reps: usize,
    pub features: Vec<Feature>,
    pub records: Vec<FeatureRecord>,
    pub bins: Vec<BinRecord>,
    pub failures: Vec<ReplicationFailure>,
}

/// Every fifth percentile and the Gini coefficient.
pub fn simulation_features() -> Vec<Feature> {
    let mut f = Feature::every_fifth_percentile();
    f.push(Feature::Gini);
    f
}

fn direct_feature(d: &TractDirect, f: &Feature) -> Option<f64> {
    let v = match f {
        Feature::Percentile { tau } => d.percentile(*tau)?.value,
        Feature::Mean => d.mean.value,
        Feature::Gini => d.gini.value,
    };
    v.is_finite().then_some(v)
}

/// Published-style records for the model. Bin standard errors are floored at
/// one sampled household's share, the others at `1e-6 max(|value|, 1)`.
pub fn tract_estimates(d: &TractDirect, breaks: &[f64]) -> Result<TractEstimates, SynthError> {
    let floor = |e: &Estimate| e.se.max(1e-6 * e.value.abs().max(1.0));
    let bin_floor = 1.0 / d.n_sampled as f64;
    let invalid = |e: crate::functionals::FunctionalError| SynthError::Input(e.to_string());
    let mut bins = Vec::with_capacity(d.bins.len());
    for (k, e) in d.bins.iter().enumerate() {
        let lower = if k == 0 { 0.0 } else { breaks[k - 1] };
        let upper = breaks.get(k).copied().unwrap_or(f64::INFINITY);
        bins.push(EstimateRecord::bin(lower, upper, e.value, e.se.max(bin_floor)).map_err(invalid)?);
    }
    Ok(TractEstimates {
        bins,
        mean: Some(EstimateRecord::mean(d.mean.value, floor(&d.mean)).map_err(invalid)?),
        median: EstimateRecord::quantile(0.5, d.median.value, floor(&d.median)).map_err(invalid)?,
    })
}

struct Truth {
    features: Vec<f64>,
    bins: Vec<f64>,
}

fn population_truth(world: &SyntheticWorld, features: &[Feature], breaks: &[f64]) -> Vec<Truth> {
    (0..world.n_tracts())
        .map(|r| {
            let pop = world.sorted_tract_incomes(r);
            let mut bins = vec![0.0; breaks.len() + 1];
            for y in &pop {
                bins[breaks.partition_point(|b| *b <= *y)] += 1.0;
            }
            bins.iter_mut().for_each(|v| *v /= pop.len() as f64);
            Truth {
                features: features
                    .iter()
                    .map(|f| finite_population_feature(&pop, f).unwrap_or(f64::NAN))
                    .collect(),
                bins,
            }
        })
        .collect()
}

struct RepOutcome {
    records: Vec<FeatureRecord>,
    bins: Vec<BinRecord>,
    failures: Vec<ReplicationFailure>,
}

struct Fitted {
    posterior: Vec<Option<Summary>>,
    prln: Vec<Option<f64>>,
}

fn fit_tract(
    d: &TractDirect,
    population: usize,
    cfg: &SimulationConfig,
    prior_center: &[f64],
    features: &[Feature],
    sampler_seed: u64,
    predictive_seed: u64,
) -> Result<Fitted, String> {
    let est = tract_estimates(d, &cfg.breaks).map_err(|e| e.to_string())?;
    let spec = build_spec(
        &est,
        PriorSettings::new(prior_center.to_vec(), cfg.prior_scale),
        MedianOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let scfg = SamplerConfig {
        seed: sampler_seed,
        ..cfg.sampler.clone()
    };
    let pd = run_hmc(&spec, &scfg).map_err(|e| e.to_string())?;
    let req = PopulationFeatureRequest {
        features: features.to_vec(),
        population,
        size_se: None,
        draws_used: cfg.draws_used,
        interval_level: cfg.interval_level,
        seed: predictive_seed,
    };
    let fp = feature_posterior(&pd, &spec, &req).map_err(|e| e.to_string())?;
    let prln = match prln_fit(&est.bins, Some(est.median.value)) {
        Ok(fit) => prln_features(&fit, features).into_iter().map(|(_, v)| v).collect(),
        Err(e) => {
            log::warn!("PRLN fit failed: {e}");
            vec![None; features.len()]
        }
    };
    Ok(Fitted {
        posterior: fp.results.iter().map(|r| r.summary).collect(),
        prln,
    })
}

fn run_replication(
    rep: usize,
    world: &SyntheticWorld,
    cfg: &SimulationConfig,
    prior_center: &[f64],
    features: &[Feature],
    truth: &[Truth],
) -> Result<RepOutcome, SynthError> {
    let mut rng = chain_rng(cfg.seed, rep);
    let sample = stratified_sample(world, cfg.sampling_fraction, &mut rng)?;
    let direct = direct_estimates_with_sdr(&sample, world.n_tracts(), &cfg.breaks, cfg.n_replicates)?;
    let mut out = RepOutcome {
        records: Vec::new(),
        bins: Vec::new(),
        failures: Vec::new(),
    };
    for (r, d) in direct.tracts.iter().enumerate() {
        let (sampler_seed, predictive_seed): (u64, u64) = (rng.random(), rng.random());
        let Some(d) = d else {
            out.failures.push(ReplicationFailure {
                rep,
                tract: r,
                message: "no sampled households".into(),
            });
            continue;
        };
        for (k, e) in d.bins.iter().enumerate() {
            out.bins.push(BinRecord {
                rep,
                tract: r,
                bin: k,
                estimate: e.value,
                truth: truth[r].bins[k],
            });
        }
        match fit_tract(d, world.tract_targets[r], cfg, prior_center, features, sampler_seed, predictive_seed) {
            Ok(fit) => {
                for (j, f) in features.iter().enumerate() {
                    out.records.push(FeatureRecord {
                        rep,
                        tract: r,
                        feature: *f,
                        truth: truth[r].features[j],
                        direct: direct_feature(d, f),
                        posterior: fit.posterior[j],
                        prln: fit.prln[j],
                    });
                }
            }
            Err(message) => {
                log::warn!("replication {rep}, tract {r} excluded: {message}");
                out.failures.push(ReplicationFailure { rep, tract: r, message });
            }
        }
    }
    Ok(out)
}

/// Runs `cfg.n_reps` replications on a fixed world.
pub fn run_simulation(
    world: &SyntheticWorld,
    reference: &ReferenceSample,
    cfg: &SimulationConfig,
) -> Result<SimulationReport, SynthError> {
    if cfg.n_reps == 0 {
        return Err(SynthError::Input("n_reps must be >= 1".into()));
    }
    let features = simulation_features();
    let truth = population_truth(world, &features, &cfg.breaks);
    let prior_center = reference.weighted_bin_shares(&cfg.breaks);
    let outcomes = (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| run_replication(rep, world, cfg, &prior_center, &features, &truth))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = SimulationReport {
        n_reps: cfg.n_reps,
        features,
        records: Vec::new(),
        bins: Vec::new(),
        failures: Vec::new(),
    };
    for o in outcomes {
        report.records.extend(o.records);
        report.bins.extend(o.bins);
        report.failures.extend(o.failures);
    }
    Ok(report)
}

/// Metrics of every estimator against the truth, pooled over replications
/// and tracts; records lacking an estimate are skipped for that estimator.
pub fn metric_table(records: &[FeatureRecord], features: &[Feature]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for e in Estimator::ALL {
        for f in features {
            let (est, truth): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter(|r| r.feature == *f && r.truth.is_finite())
                .filter_map(|r| r.estimate(e).map(|v| (v, r.truth)))
                .unzip();
            rows.push(MetricRow {
                feature: *f,
                estimator: e,
                metrics: metrics(&est, &truth).ok(),
            });
        }
    }
    rows
}

/// Per-feature coverage of the credible interval of the true value and of
/// the PRLN estimate.
pub fn coverage_table(records: &[FeatureRecord], features: &[Feature]) -> Vec<CoverageRow> {
    features
        .iter()
        .map(|f| {
            let with_post: Vec<&FeatureRecord> = records
                .iter()
                .filter(|r| r.feature == *f && r.posterior.is_some())
                .collect();
            let share = |hits: usize, n: usize| (n > 0).then(|| hits as f64 / n as f64);
            let truth_hits = with_post
                .iter()
                .filter(|r| r.posterior.is_some_and(|s| s.covers(r.truth)))
                .count();
            let prln: Vec<(Summary, f64)> = with_post
                .iter()
                .filter_map(|r| r.prln.map(|p| (r.posterior.unwrap(), p)))
                .collect();
            let prln_hits = prln.iter().filter(|(s, p)| s.covers(*p)).count();
            CoverageRow {
                feature: *f,
                vs_truth: share(truth_hits, with_post.len()),
                vs_prln: share(prln_hits, prln.len()),
                n: with_post.len(),
            }
        })
        .collect()
}

/// Mean error of the direct bin estimates, pooled over replications and
/// tracts, with its Monte Carlo standard error.
pub fn bin_bias(bins: &[BinRecord]) -> Vec<BinBias> {
    let k = bins.iter().map(|b| b.bin + 1).max().unwrap_or(0);
    (0..k)
        .map(|bin| {
            let err: Vec<f64> = bins
                .iter()
                .filter(|b| b.bin == bin)
                .map(|b| b.estimate - b.truth)
                .collect();
            BinBias {
                bin,
                mean_error: mean(&err),
                mc_se: (sample_variance(&err) / err.len() as f64).sqrt(),
                n: err.len(),
            }
        })
        .collect()
}

const METRIC_NAMES: [&str; 4] = ["MAD", "MAPE", "RMSE", "RMSPE"];

fn metric_value(m: &Metrics, name: &str) -> Option<f64> {
    match name {
        "MAD" => Some(m.mad),
        "MAPE" => m.mape,
        "RMSE" => Some(m.rmse),
        _ => m.rmspe,
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map_or_else(String::new, |x| format!("{x:.4}"))
}

fn header(features: &[Feature]) -> String {
    let mut h = String::from("metric,estimator");
    for f in features {
        h.push(',');
        h.push_str(&f.label());
    }
    h.push('\n');
    h
}

fn lookup<'a>(rows: &'a [MetricRow], f: &Feature, e: Estimator) -> Option<&'a Metrics> {
    rows.iter()
        .find(|r| r.feature == *f && r.estimator == e)
        .and_then(|r| r.metrics.as_ref())
}

/// Raw metrics, one row per metric and estimator, one column per feature.
pub fn raw_metrics_csv(rows: &[MetricRow], features: &[Feature]) -> String {
    let mut out = header(features);
    for name in METRIC_NAMES {
        for e in Estimator::ALL {
            out.push_str(&format!("{name},{}", e.label()));
            for f in features {
                out.push(',');
                out.push_str(&fmt_cell(lookup(rows, f, e).and_then(|m| metric_value(m, name))));
            }
            out.push('\n');
        }
    }
    out
}

/// `100 (metric - direct metric) / direct metric` for the model and PRLN;
/// negative values favour the estimator over the direct estimate.
pub fn percent_difference_csv(rows: &[MetricRow], features: &[Feature]) -> String {
    let mut out = header(features);
    for name in METRIC_NAMES {
        for e in &Estimator::ALL[1..] {
            out.push_str(&format!("{name},{}", e.label()));
            for f in features {
                let d = lookup(rows, f, Estimator::Direct).and_then(|m| metric_value(m, name));
                let v = lookup(rows, f, *e).and_then(|m| metric_value(m, name));
                let pct = match (v, d) {
                    (Some(v), Some(d)) if d != 0.0 => Some(100.0 * (v - d) / d),
                    _ => None,
                };
                out.push(',');
                out.push_str(&fmt_cell(pct));
            }
            out.push('\n');
        }
    }
    out
}

pub fn coverage_csv(rows: &[CoverageRow]) -> String {
    let mut out = String::from("feature,population,prln,n\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.feature.label(),
            fmt_cell(r.vs_truth),
            fmt_cell(r.vs_prln),
            r.n
        ));
    }
    out
}

impl SimulationReport {
    pub fn metric_table(&self) -> Vec<MetricRow> {
        metric_table(&self.records, &self.features)
    }

    pub fn coverage_table(&self) -> Vec<CoverageRow> {
        coverage_table(&self.records, &self.features)
    }

    pub fn bin_bias(&self) -> Vec<BinBias> {
        bin_bias(&self.bins)
    }
}
