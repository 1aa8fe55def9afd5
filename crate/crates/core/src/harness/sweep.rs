use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{derive_seed, max_weight_assignment, wrap_pi};
use crate::pipeline::{estimate_paths, EstimateSet, EstimatorConfig};
use crate::signal::{generate_offsets, static_component, synthesize_csi, OffsetModel, PathSet, ScenarioSpec, SystemConfig};

/// Which parameter an NMSE value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Doppler,
    Aoa,
    Delay,
}

impl ParamKind {
    pub const ALL: [ParamKind; 3] = [ParamKind::Doppler, ParamKind::Aoa, ParamKind::Delay];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Doppler => "doppler",
            ParamKind::Aoa => "aoa",
            ParamKind::Delay => "delay",
        }
    }
}

fn all_kinds() -> Vec<ParamKind> {
    ParamKind::ALL.to_vec()
}

fn default_offsets() -> OffsetModel {
    OffsetModel::IidUniform { timing: (0.0, 0.3e-6), cfo: (-100.0, 100.0) }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub snr_db: Vec<f64>,
    /// Adds a noiseless point after the listed SNRs.
    #[serde(default)]
    pub include_noiseless: bool,
    pub trials: usize,
    pub scenario: ScenarioSpec,
    #[serde(default = "default_offsets")]
    pub offsets: OffsetModel,
    /// Hand the estimator the true `S_n[g]` so absolute delays exist.
    #[serde(default = "default_true")]
    pub oracle_static: bool,
    #[serde(default = "all_kinds")]
    pub parameters: Vec<ParamKind>,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(snr_db: Vec<f64>, trials: usize, scenario: ScenarioSpec, seed: u64) -> Self {
        SweepSpec {
            snr_db,
            include_noiseless: false,
            trials,
            scenario,
            offsets: default_offsets(),
            oracle_static: true,
            parameters: all_kinds(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("sweep needs at least one trial per point"));
        }
        if self.snr_db.is_empty() && !self.include_noiseless {
            return Err(invalid("sweep needs at least one SNR point"));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(invalid("SNR values must be finite; use include_noiseless for the noiseless point"));
        }
        if self.scenario.dynamic_paths == 0 {
            return Err(invalid("sweep scenario needs at least one dynamic path"));
        }
        if self.parameters.is_empty() {
            return Err(invalid("sweep needs at least one parameter kind"));
        }
        Ok(())
    }

    fn points(&self) -> Vec<Option<f64>> {
        let mut points: Vec<Option<f64>> = self.snr_db.iter().copied().map(Some).collect();
        if self.include_noiseless {
            points.push(None);
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseRecord {
    pub kind: ParamKind,
    /// `None` for the noiseless point.
    pub snr_db: Option<f64>,
    pub nmse: f64,
    /// 95% normal-approximation half-width of the mean.
    pub ci_half_width: f64,
    /// Trials that produced this parameter.
    pub trials: usize,
    /// Trials that did not.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<NmseRecord>,
    /// How each parameter's error is normalised.
    pub normalisation: String,
}

pub const NMSE_NORMALISATION: &str = "doppler and delay: |error|^2 / |truth|^2; aoa: wrapped spatial-frequency error^2 / pi^2";

/// Per-path squared normalised errors of one trial, `None` where the
/// estimator produced nothing for that parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialErrors {
    pub doppler: Option<Vec<f64>>,
    pub aoa: Option<Vec<f64>>,
    pub delay: Option<Vec<f64>>,
}

impl TrialErrors {
    fn get(&self, kind: ParamKind) -> Option<&Vec<f64>> {
        match kind {
            ParamKind::Doppler => self.doppler.as_ref(),
            ParamKind::Aoa => self.aoa.as_ref(),
            ParamKind::Delay => self.delay.as_ref(),
        }
    }
}

/// Matches estimated paths to true ones by closest Doppler and returns the
/// normalised squared errors. Delays live on `[0, symbol_duration)`, so the
/// delay error is the circular difference.
pub fn trial_errors(est: &EstimateSet, truth: &PathSet, symbol_duration: f64) -> TrialErrors {
    let dynamic = &truth.dynamic;
    // a failed stage leaves NaN or None in the fields it never filled
    if est.paths.len() != dynamic.len() || est.paths.iter().any(|p| !p.f_d_hz.is_finite()) {
        return TrialErrors { doppler: None, aoa: None, delay: None };
    }
    let scores: Vec<Vec<f64>> = dynamic
        .iter()
        .map(|t| est.paths.iter().map(|p| -(p.f_d_hz - t.doppler_hz).abs()).collect())
        .collect();
    let assignment = max_weight_assignment(&scores);
    let matched: Vec<_> = assignment.iter().map(|&i| &est.paths[i]).collect();
    let doppler = Some(
        dynamic
            .iter()
            .zip(&matched)
            .map(|(t, p)| ((p.f_d_hz - t.doppler_hz) / t.doppler_hz).powi(2))
            .collect(),
    );
    let aoa = matched.iter().all(|p| p.spatial_freq.is_finite()).then(|| {
        dynamic
            .iter()
            .zip(&matched)
            .map(|(t, p)| (wrap_pi(p.spatial_freq - t.spatial_freq) / std::f64::consts::PI).powi(2))
            .collect()
    });
    let delay = matched.iter().all(|p| p.tau_s.is_some()).then(|| {
        dynamic
            .iter()
            .zip(&matched)
            .map(|(t, p)| {
                let half = symbol_duration / 2.0;
                let gap = (p.tau_s.unwrap_or(f64::NAN) - t.delay_s + half).rem_euclid(symbol_duration) - half;
                (gap / t.delay_s).powi(2)
            })
            .collect()
    });
    TrialErrors { doppler, aoa, delay }
}

/// Runs one trial: channel seed `derive_seed(seed, trial)` shared by every
/// SNR point, noise seed derived from it and the point index.
pub fn run_trial(
    sys: &SystemConfig,
    est_cfg: &EstimatorConfig,
    spec: &SweepSpec,
    snr_db: Option<f64>,
    point: usize,
    trial: u64,
) -> Result<(PathSet, EstimateSet)> {
    let channel_seed = derive_seed(spec.seed, trial);
    let paths = spec.scenario.draw(sys, channel_seed)?;
    let offsets = generate_offsets(&spec.offsets, sys.packet_count, derive_seed(channel_seed, 1))?;
    let noisy = sys.clone().with_snr(snr_db);
    let noise_seed = derive_seed(channel_seed, 1000 + point as u64);
    let y = synthesize_csi(&noisy, &paths, &offsets, Some(noise_seed))?;
    let reference = spec.oracle_static.then(|| static_component(&paths, sys));
    let est = estimate_paths(&y, est_cfg, spec.scenario.dynamic_paths, reference.as_ref());
    Ok((paths, est))
}

fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Monte-Carlo NMSE per parameter and SNR point. Estimator failures are
/// counted per record, never fatal. Output is sorted by SNR point, then by
/// parameter, and identical for identical `(spec, seed)`.
pub fn run_nmse_sweep(sys: &SystemConfig, est_cfg: &EstimatorConfig, spec: &SweepSpec) -> Result<SweepReport> {
    spec.validate()?;
    let mut records = Vec::new();
    for (point, snr) in spec.points().into_iter().enumerate() {
        let trials: Vec<TrialErrors> = (0..spec.trials as u64)
            .into_par_iter()
            .map(|t| run_trial(sys, est_cfg, spec, snr, point, t).map(|(paths, est)| trial_errors(&est, &paths, sys.symbol_duration)))
            .collect::<Result<_>>()?;
        let mut kinds = spec.parameters.clone();
        kinds.sort();
        kinds.dedup();
        for kind in kinds {
            let per_trial: Vec<f64> = trials
                .iter()
                .filter_map(|t| t.get(kind))
                .filter(|v| v.iter().all(|e| e.is_finite()))
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect();
            let failures = spec.trials - per_trial.len();
            if per_trial.is_empty() {
                records.push(NmseRecord {
                    kind,
                    snr_db: snr,
                    nmse: f64::NAN,
                    ci_half_width: f64::NAN,
                    trials: 0,
                    failures,
                });
                continue;
            }
            let (nmse, ci_half_width) = mean_and_half_width(&per_trial);
            records.push(NmseRecord { kind, snr_db: snr, nmse, ci_half_width, trials: per_trial.len(), failures });
        }
    }
    Ok(SweepReport { records, normalisation: NMSE_NORMALISATION.to_string() })
}
