//! Hamiltonian Monte Carlo with no-U-turn trajectories, warmup adaptation,
//! multi-chain execution, and convergence diagnostics.
//!
//! Chain `c` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `c`, so
//! results do not depend on how chains are scheduled across threads.

mod adapt;
mod diagnostics;
mod nuts;

pub use diagnostics::{
    diagnostics, ess_bulk, split_rhat, DiagnosticsReport, ParameterDiagnostics,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use adapt::Adapter;
use nuts::{Nuts, Point};

/// A differentiable log density on `R^dim`. Implementations must be pure.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Returns `log p(x)` and writes `∇ log p(x)` into `grad`.
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("chain {chain}: log density or gradient is not finite at the initial point")]
    Initialization { chain: usize },
    #[error("diagnostics need at least {min_chains} chains of {min_draws} draws")]
    TooFewDraws { min_chains: usize, min_draws: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassMatrix {
    #[default]
    DiagonalAdaptive,
    Identity,
}

/// Where chains start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Each coordinate uniform on `[-radius, radius]`, redrawn up to 100
    /// times if the target is not finite there.
    Uniform { radius: f64 },
    /// Every chain starts at this point.
    Point(Vec<f64>),
}

impl Default for Init {
    fn default() -> Self {
        Init::Uniform { radius: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_leapfrog: usize,
    pub mass_matrix: MassMatrix,
    pub init: Init,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 4000,
            draws: 4000,
            seed: 0,
            target_accept: 0.8,
            max_leapfrog: 1024,
            mass_matrix: MassMatrix::DiagonalAdaptive,
            init: Init::default(),
        }
    }
}

impl SamplerConfig {
    fn validate(&self, dim: usize) -> Result<(), SamplerError> {
        if self.chains == 0 || self.draws == 0 || self.max_leapfrog == 0 {
            return Err(SamplerError::Config(
                "chains, draws and max_leapfrog must be at least 1".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config(format!(
                "target_accept {} is outside (0, 1)",
                self.target_accept
            )));
        }
        match &self.init {
            Init::Uniform { radius } if !(radius.is_finite() && *radius >= 0.0) => {
                Err(SamplerError::Config("init radius must be >= 0".into()))
            }
            Init::Point(p) if p.len() != dim => Err(SamplerError::Config(format!(
                "init point has length {} for dimension {dim}",
                p.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Largest tree depth whose trajectory stays within `max_leapfrog` steps.
    fn max_depth(&self) -> usize {
        let mut depth = 0;
        while (1usize << (depth + 1)) - 1 <= self.max_leapfrog {
            depth += 1;
        }
        depth.max(1)
    }
}

/// Post-warmup output of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    /// Row-major `draws × dim`.
    pub draws: Vec<f64>,
    pub log_density: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub n_leapfrog: Vec<usize>,
    pub divergent: Vec<bool>,
    /// Hamiltonian of the selected point minus that of the trajectory start.
    pub energy_change: Vec<f64>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

impl ChainOutput {
    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }

    pub fn mean_accept_stat(&self) -> f64 {
        crate::stats::mean(&self.accept_stat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub dim: usize,
    pub n_draws: usize,
    pub chains: Vec<ChainOutput>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draw(&self, chain: usize, i: usize) -> &[f64] {
        &self.chains[chain].draws[i * self.dim..(i + 1) * self.dim]
    }

    /// All draws, chain by chain.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.chains
            .iter()
            .flat_map(move |c| c.draws.chunks_exact(self.dim.max(1)))
    }

    /// Coordinate `j` of chain `chain` as a series.
    pub fn coordinate(&self, chain: usize, j: usize) -> Vec<f64> {
        (0..self.n_draws).map(|i| self.draw(chain, i)[j]).collect()
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains() * self.n_draws
    }

    pub fn divergence_counts(&self) -> Vec<usize> {
        self.chains.iter().map(ChainOutput::divergences).collect()
    }
}

/// Runs `cfg.chains` independent chains in parallel.
pub fn run_hmc<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws, SamplerError> {
    let dim = target.dim();
    cfg.validate(dim)?;
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PosteriorDraws {
        dim,
        n_draws: cfg.draws,
        chains,
    })
}

/// The generator used by chain `chain`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn initial_point<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
    chain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Point, SamplerError> {
    let dim = target.dim();
    let attempts = match cfg.init {
        Init::Uniform { .. } => 100,
        Init::Point(_) => 1,
    };
    for _ in 0..attempts {
        let q: Vec<f64> = match &cfg.init {
            Init::Uniform { radius } => (0..dim)
                .map(|_| {
                    if *radius > 0.0 {
                        rng.random_range(-radius..=*radius)
                    } else {
                        0.0
                    }
                })
                .collect(),
            Init::Point(p) => p.clone(),
        };
        let pt = Point::at(target, q);
        if pt.logp.is_finite() && pt.grad.iter().all(|g| g.is_finite()) {
            return Ok(pt);
        }
    }
    Err(SamplerError::Initialization { chain })
}

fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<ChainOutput, SamplerError> {
    let dim = target.dim();
    let mut rng = chain_rng(cfg.seed, chain);
    let mut current = initial_point(target, cfg, chain, &mut rng)?;
    let mut nuts = Nuts::new(target, cfg.max_depth());
    nuts.step_size = nuts.find_reasonable_step_size(&current, &mut rng);
    let adapt_metric = cfg.mass_matrix == MassMatrix::DiagonalAdaptive;
    let mut adapter = Adapter::new(cfg.warmup, dim, cfg.target_accept, adapt_metric);
    adapter.restart(nuts.step_size);

    for it in 0..cfg.warmup {
        let tr = nuts.transition(&current, &mut rng);
        current = tr.point;
        nuts.step_size = adapter.learn_step_size(it, tr.accept_stat);
        if adapter.observe(it, &current.q) {
            nuts.inv_metric = adapter.inv_metric().to_vec();
            nuts.step_size = nuts.find_reasonable_step_size(&current, &mut rng);
            adapter.restart(nuts.step_size);
        }
    }
    if cfg.warmup > 0 {
        nuts.step_size = adapter.final_step_size();
    }

    let mut out = ChainOutput {
        draws: Vec::with_capacity(cfg.draws * dim),
        log_density: Vec::with_capacity(cfg.draws),
        accept_stat: Vec::with_capacity(cfg.draws),
        n_leapfrog: Vec::with_capacity(cfg.draws),
        divergent: Vec::with_capacity(cfg.draws),
        energy_change: Vec::with_capacity(cfg.draws),
        step_size: nuts.step_size,
        inv_metric: nuts.inv_metric.clone(),
    };
    for _ in 0..cfg.draws {
        let tr = nuts.transition(&current, &mut rng);
        current = tr.point;
        out.draws.extend_from_slice(&current.q);
        out.log_density.push(current.logp);
        out.accept_stat.push(tr.accept_stat);
        out.n_leapfrog.push(tr.n_leapfrog);
        out.divergent.push(tr.divergent);
        out.energy_change.push(tr.energy_change);
    }
    Ok(out)
}
