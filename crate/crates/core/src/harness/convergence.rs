use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::derive_seed;
use crate::ratio::error_proportion;
use crate::signal::{OffsetTrace, ScenarioSpec, SystemConfig};

/// Grid of `(L, L_S)` cells for the Taylor convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub dynamic_paths: Vec<usize>,
    pub static_paths: Vec<usize>,
    /// Extra power of one static path, applied to every cell.
    #[serde(default)]
    pub los_advantage_db: Option<f64>,
    pub trials: usize,
    /// Packet lag of the D-CSIR being expanded.
    #[serde(default = "default_lag")]
    pub lag: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lag() -> usize {
    2
}

impl ConvergenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("convergence study needs at least one trial"));
        }
        if self.dynamic_paths.is_empty() || self.static_paths.is_empty() {
            return Err(invalid("convergence study needs non-empty L and L_S ranges"));
        }
        if self.static_paths.contains(&0) {
            return Err(invalid("every cell needs at least one static path"));
        }
        Ok(())
    }
}

/// Monte-Carlo averages for one `(L, L_S)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCell {
    pub dynamic_paths: usize,
    pub static_paths: usize,
    pub los_advantage_db: Option<f64>,
    pub error_proportion: f64,
    pub convergence_probability: f64,
    pub trials: usize,
}

/// Averages the Taylor diagnostics of `trials` random channels drawn from
/// `scenario`. Trial `t` uses seed `derive_seed(seed, t)`.
pub fn run_convergence_cell(
    cfg: &SystemConfig,
    scenario: &ScenarioSpec,
    trials: usize,
    lag: usize,
    seed: u64,
) -> Result<ConvergenceCell> {
    let offsets = OffsetTrace::zero(cfg.packet_count);
    let diagnostics = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let paths = scenario.draw(cfg, derive_seed(seed, t))?;
            error_proportion(cfg, &paths, &offsets, lag)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = diagnostics.len().max(1) as f64;
    Ok(ConvergenceCell {
        dynamic_paths: scenario.dynamic_paths,
        static_paths: scenario.static_paths,
        los_advantage_db: scenario.los_advantage_db,
        error_proportion: diagnostics.iter().map(|d| d.error_proportion).sum::<f64>() / n,
        convergence_probability: diagnostics.iter().map(|d| d.convergence_probability).sum::<f64>() / n,
        trials,
    })
}

/// Every cell of the grid, row-major in `(L, L_S)`.
pub fn run_convergence_study(cfg: &SystemConfig, spec: &ConvergenceSpec) -> Result<Vec<ConvergenceCell>> {
    spec.validate()?;
    let cells: Vec<(usize, usize)> = spec
        .dynamic_paths
        .iter()
        .flat_map(|&l| spec.static_paths.iter().map(move |&ls| (l, ls)))
        .collect();
    cells
        .iter()
        .enumerate()
        .map(|(i, &(l, ls))| {
            let mut scenario = ScenarioSpec::new(l, ls);
            scenario.los_advantage_db = spec.los_advantage_db;
            run_convergence_cell(cfg, &scenario, spec.trials, spec.lag, derive_seed(spec.seed, i as u64))
        })
        .collect()
}
