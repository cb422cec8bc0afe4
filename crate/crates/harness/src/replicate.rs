//! Running a scenario over many seeds.

use nln_sim::{run, RunOutput, ScenarioConfig};
use rayon::prelude::*;

use crate::error::HarnessResult;
use crate::report::{evaluate, MetricReport};

/// Runs `cfg` once per seed on the worker pool. Results come back in the
/// order of `seeds` regardless of scheduling.
pub fn replicate(cfg: &ScenarioConfig, seeds: &[u64]) -> HarnessResult<Vec<(u64, RunOutput)>> {
    let outs: Vec<_> = seeds.par_iter().map(|&s| run(cfg, s).map(|o| (s, o))).collect();
    outs.into_iter().map(|r| r.map_err(Into::into)).collect()
}

/// `count` consecutive seeds starting at the scenario's own.
pub fn seed_range(cfg: &ScenarioConfig, count: u64) -> Vec<u64> {
    (0..count).map(|i| cfg.seed.wrapping_add(i)).collect()
}

/// Replicates and evaluates in one step.
pub fn replicate_report(cfg: &ScenarioConfig, seeds: &[u64]) -> HarnessResult<MetricReport> {
    evaluate(cfg, &replicate(cfg, seeds)?)
}
