//! `simulate`: the design-based simulation study on a synthetic world.

use std::path::Path;
use std::time::Instant;

use log::info;
use popinterp::synthpop::simulation::{coverage_csv, percent_difference_csv, raw_metrics_csv};
use popinterp::synthpop::{run_simulation, ReferenceSample, SimulationConfig, SyntheticWorld, WorldConfig};

use super::hash_input;
use crate::config::{nonzero, CommandConfig, SimulateConfig};
use crate::error::{CliError, Result};
use crate::ingest::read_pums;
use crate::output::{csv_bytes, fmt_num, fmt_opt, Manifest, OutputDir};

pub const RAW_METRICS_FILE: &str = "metrics_raw.csv";
pub const PCT_METRICS_FILE: &str = "metrics_pct_diff.csv";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const BIN_BIAS_FILE: &str = "bin_bias.csv";
pub const RECORDS_FILE: &str = "records.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const WORLD_FILE: &str = "world.csv";

fn synth_err(e: impl std::fmt::Display) -> CliError {
    CliError::invalid(e.to_string())
}

pub fn run(cfg: &SimulateConfig, out_dir: &Path) -> Result<Manifest> {
    let mut inputs = Vec::new();
    let reference = if cfg.reference.as_os_str().is_empty() {
        ReferenceSample::synthetic(cfg.reference_strata, cfg.reference_households, cfg.seed)
            .map_err(synth_err)?
    } else {
        inputs.push(hash_input("reference", &cfg.reference)?);
        let rows: Vec<(f64, f64)> = read_pums(&cfg.reference)?
            .into_iter()
            .map(|r| (r.income, r.weight))
            .collect();
        ReferenceSample::from_weighted_incomes(&rows).map_err(synth_err)?
    };
    let world = SyntheticWorld::generate(
        &reference,
        &WorldConfig {
            n_tracts: cfg.n_tracts,
            centroids: None,
            seed: cfg.seed,
        },
    )
    .map_err(synth_err)?;
    info!(
        "world: {} households in {} tracts, {} strata",
        world.n_households(),
        world.n_tracts(),
        world.strata.len()
    );
    let sim = SimulationConfig {
        n_reps: cfg.n_reps,
        sampling_fraction: cfg.sampling_fraction,
        n_replicates: cfg.n_replicates,
        breaks: cfg.breaks.clone(),
        prior_scale: cfg.prior_scale,
        sampler: cfg.sampler.to_config(cfg.seed),
        draws_used: nonzero(cfg.draws_used),
        interval_level: cfg.interval_level,
        seed: cfg.seed,
    };
    let started = Instant::now();
    let report = run_simulation(&world, &reference, &sim).map_err(synth_err)?;
    info!("simulation finished in {:.1?}", started.elapsed());

    let metrics = report.metric_table();
    let bias = report.bin_bias();
    let mut out = OutputDir::create(out_dir)?;
    out.write(RAW_METRICS_FILE, raw_metrics_csv(&metrics, &report.features).as_bytes())?;
    out.write(PCT_METRICS_FILE, percent_difference_csv(&metrics, &report.features).as_bytes())?;
    out.write(COVERAGE_FILE, coverage_csv(&report.coverage_table()).as_bytes())?;
    out.write(
        BIN_BIAS_FILE,
        &csv_bytes(
            &["bin", "mean_error", "mc_se", "z", "n"],
            bias.iter().map(|b| {
                vec![
                    b.bin.to_string(),
                    fmt_num(b.mean_error),
                    fmt_num(b.mc_se),
                    fmt_opt((b.mc_se > 0.0).then(|| b.mean_error / b.mc_se)),
                    b.n.to_string(),
                ]
            }),
        )?,
    )?;
    out.write(
        RECORDS_FILE,
        &csv_bytes(
            &["rep", "tract", "feature", "truth", "direct", "post_mean", "post_median", "lower", "upper", "prln"],
            report.records.iter().map(|r| {
                let s = r.posterior;
                vec![
                    r.rep.to_string(),
                    r.tract.to_string(),
                    r.feature.label(),
                    fmt_num(r.truth),
                    fmt_opt(r.direct),
                    fmt_opt(s.map(|s| s.mean)),
                    fmt_opt(s.map(|s| s.median)),
                    fmt_opt(s.map(|s| s.lower)),
                    fmt_opt(s.map(|s| s.upper)),
                    fmt_opt(r.prln),
                ]
            }),
        )?,
    )?;
    out.write(
        FAILURES_FILE,
        &csv_bytes(
            &["rep", "tract", "message"],
            report
                .failures
                .iter()
                .map(|f| vec![f.rep.to_string(), f.tract.to_string(), f.message.clone()]),
        )?,
    )?;
    out.write(
        WORLD_FILE,
        &csv_bytes(
            &["tract", "households", "sdist"],
            (0..world.n_tracts()).map(|r| {
                vec![
                    r.to_string(),
                    world.tract_range(r).len().to_string(),
                    fmt_num(world.sdist[r]),
                ]
            }),
        )?,
    )?;
    let summary = serde_json::json!({
        "households": world.n_households(),
        "n_reps": report.n_reps,
        "n_failures": report.failures.len(),
        "max_abs_bin_bias_z": bias
            .iter()
            .filter(|b| b.mc_se > 0.0)
            .map(|b| (b.mean_error / b.mc_se).abs())
            .fold(0.0, f64::max),
    });
    out.finish(SimulateConfig::NAME, cfg.seed, cfg, inputs, summary)
}
