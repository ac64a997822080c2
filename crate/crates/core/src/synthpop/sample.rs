//! Stratified simple random sampling without replacement.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SynthError, SyntheticWorld};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleUnit {
    pub household: usize,
    pub tract: usize,
    pub stratum: usize,
    pub income: f64,
    pub weight: f64,
}

/// Sampled households in household order, with design weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub units: Vec<SampleUnit>,
    pub allocation: Vec<usize>,
}

/// Stratum sample sizes proportional to the reference sample sizes `n_s`,
/// totalling about `fraction` of the population. A fraction of 1 takes
/// every household.
pub fn proportional_allocation(world: &SyntheticWorld, fraction: f64) -> Result<Vec<usize>, SynthError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SynthError::Input(format!(
            "sampling fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(world.strata.iter().map(|s| s.population).collect());
    }
    let n_ref: usize = world.strata.iter().map(|s| s.sample_size).sum();
    let scale = fraction * world.n_households() as f64 / n_ref as f64;
    Ok(world
        .strata
        .iter()
        .map(|s| {
            if s.population == 0 {
                0
            } else {
                ((s.sample_size as f64 * scale).round() as usize).max(1)
            }
        })
        .collect())
}

/// Draws `allocation[s]` households from stratum `s` without replacement.
/// Each sampled household carries weight `N_s / n_s`.
pub fn sample_with_allocation<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    allocation: &[usize],
    rng: &mut R,
) -> Result<Sample, SynthError> {
    if allocation.len() != world.strata.len() {
        return Err(SynthError::Input(format!(
            "{} allocations for {} strata",
            allocation.len(),
            world.strata.len()
        )));
    }
    if world.incomes.len() != world.n_households() {
        return Err(SynthError::Input("world has no incomes".into()));
    }
    for (s, (a, info)) in allocation.iter().zip(&world.strata).enumerate() {
        if *a > info.population {
            return Err(SynthError::Input(format!(
                "stratum {s}: allocation {a} exceeds population {}",
                info.population
            )));
        }
    }
    let members = world.stratum_members();
    let tract_of: Vec<usize> = world.households().map(|(r, _)| r).collect();
    let mut units = Vec::with_capacity(allocation.iter().sum());
    for (s, (&a, m)) in allocation.iter().zip(&members).enumerate() {
        if a == 0 {
            continue;
        }
        let weight = world.strata[s].population as f64 / a as f64;
        for i in index::sample(rng, m.len(), a) {
            let h = m[i];
            units.push(SampleUnit {
                household: h,
                tract: tract_of[h],
                stratum: s,
                income: world.incomes[h],
                weight,
            });
        }
    }
    units.sort_by_key(|u| u.household);
    Ok(Sample {
        units,
        allocation: allocation.to_vec(),
    })
}

pub fn stratified_sample<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    fraction: f64,
    rng: &mut R,
) -> Result<Sample, SynthError> {
    let allocation = proportional_allocation(world, fraction)?;
    sample_with_allocation(world, &allocation, rng)
}
