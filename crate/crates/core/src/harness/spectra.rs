use std::f64::consts::TAU;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::delay::delay_profiles;
use crate::doppler::SpectrumTrace;
use crate::error::{invalid, Error, Result};
use crate::numerics::{cis, left_svd, CMatrix, CVector};
use crate::pipeline::{estimate_paths, EstimateSet, EstimatorConfig};
use crate::signal::{generate_offsets, static_component, synthesize_csi, CsiTensor, OffsetModel, PathSet, ScenarioSpec, SystemConfig};

/// Conventional temporal MUSIC on the raw CSI of one antenna and
/// subcarrier: snapshots are `window` consecutive packets, the noise
/// subspace is everything past the `sources` strongest eigenvectors of the
/// sample covariance. Offsets and static paths pass straight through, which
/// is the point of the comparison.
pub fn conventional_music(
    y: &CsiTensor,
    antenna: usize,
    subcarrier: usize,
    window: usize,
    sources: usize,
    grid: &[f64],
) -> Result<SpectrumTrace> {
    let (mc, gc, nc) = y.dims();
    if antenna >= nc || subcarrier >= gc {
        return Err(invalid(format!("sample (n = {antenna}, g = {subcarrier}) outside the tensor")));
    }
    if window < 2 || window >= mc {
        return Err(invalid(format!("baseline window {window} must lie in 2..{mc}")));
    }
    if sources == 0 || sources >= window {
        return Err(invalid(format!("baseline needs 1..{window} sources, got {sources}")));
    }
    let snapshots = mc - window + 1;
    let x = CMatrix::from_fn(window, snapshots, |i, m| y.get(m + i, subcarrier, antenna));
    // left singular vectors of X are the covariance eigenvectors
    let (u, _) = left_svd(&x);
    let noise = u.columns(sources, window - sources).into_owned();
    let interval = y.config().packet_interval;
    let scale = 1.0 / (window as f64).sqrt();
    let values = grid
        .iter()
        .map(|&f| {
            let a = CVector::from_fn(window, |i, _| cis(TAU * i as f64 * interval * f) * scale);
            1.0 / (noise.adjoint() * a).norm_squared().max(f64::MIN_POSITIVE)
        })
        .collect();
    Ok(SpectrumTrace { axis: grid.to_vec(), values })
}

fn default_window() -> usize {
    30
}

fn default_delay_points() -> usize {
    1000
}

fn default_offsets() -> OffsetModel {
    OffsetModel::Zero
}

/// One noiseless multi-path scenario for the spectrum comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSpec {
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub seed: u64,
    /// The baseline has no offset protection, so it is shown on a
    /// synchronised link by default.
    #[serde(default = "default_offsets")]
    pub offsets: OffsetModel,
    /// Moves every later dynamic path to this delay gap (s) behind the
    /// first, for the closely spaced case.
    #[serde(default)]
    pub delay_gap_s: Option<f64>,
    #[serde(default = "default_window")]
    pub baseline_window: usize,
    #[serde(default = "default_delay_points")]
    pub delay_points: usize,
}

impl SpectrumSpec {
    pub fn new(scenario: ScenarioSpec, seed: u64) -> Self {
        SpectrumSpec {
            scenario,
            seed,
            offsets: default_offsets(),
            delay_gap_s: None,
            baseline_window: default_window(),
            delay_points: default_delay_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumShapes {
    pub truth: PathSet,
    pub estimate: EstimateSet,
    /// Baseline on a grid that includes 0 Hz.
    pub conventional: SpectrumTrace,
    /// One trace per estimated path, over `[0, T)`.
    pub delay_profiles: Vec<SpectrumTrace>,
    /// Largest proposed Doppler spectrum value at the grid points next to
    /// 0 Hz, over the smallest true-path peak (highest sample within two
    /// grid steps of a true Doppler).
    pub zero_hz_ratio: f64,
    /// Location of the baseline's global maximum.
    pub conventional_peak_hz: f64,
}

/// Noiseless `L`-path channel, the full estimator chain with the oracle
/// static component, and the conventional baseline for contrast.
pub fn run_spectrum_shapes(sys: &SystemConfig, est_cfg: &EstimatorConfig, spec: &SpectrumSpec) -> Result<SpectrumShapes> {
    let sys = sys.clone().with_snr(None);
    let mut truth = spec.scenario.draw(&sys, spec.seed)?;
    if let Some(gap) = spec.delay_gap_s {
        let first = truth.dynamic.first().map(|p| p.delay_s).unwrap_or(0.0);
        for (i, p) in truth.dynamic.iter_mut().enumerate().skip(1) {
            p.delay_s = first + gap * i as f64;
        }
        truth.validate(&sys)?;
    }
    let offsets = generate_offsets(&spec.offsets, sys.packet_count, spec.seed)?;
    let y = synthesize_csi(&sys, &truth, &offsets, None)?;
    let reference = static_component(&truth, &sys);
    let estimate = estimate_paths(&y, est_cfg, truth.dynamic.len(), Some(&reference));
    if let Some(msg) = &estimate.failure {
        return Err(Error::RankDeficient(format!("estimator chain failed: {msg}")));
    }

    let step = est_cfg.doppler.grid_step();
    let span = est_cfg.doppler.grid.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    let count = (2.0 * span / step).round() as usize + 1;
    let baseline_grid: Vec<f64> = (0..count).map(|i| -span + i as f64 * step).collect();
    let sources = truth.dynamic.len() + 1;
    let conventional = conventional_music(&y, 1.min(sys.antenna_count - 1), 0, spec.baseline_window, sources, &baseline_grid)?;
    let conventional_peak_hz = conventional
        .values
        .iter()
        .zip(&conventional.axis)
        .max_by(|a, b| a.0.total_cmp(b.0))
        .map(|(_, f)| *f)
        .unwrap_or(f64::NAN);

    let doppler = estimate.doppler_spectrum.as_ref().ok_or_else(|| invalid("missing Doppler spectrum"))?;
    let near_zero = doppler
        .axis
        .iter()
        .zip(&doppler.values)
        .filter(|(f, _)| f.abs() <= step * (1.0 + 1e-9))
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    // a noiseless peak is far narrower than the grid, so take the highest
    // sample within two steps of each true Doppler
    let smallest_true = truth
        .dynamic
        .iter()
        .map(|p| {
            doppler
                .axis
                .iter()
                .zip(&doppler.values)
                .filter(|(f, _)| (*f - p.doppler_hz).abs() <= 2.0 * step)
                .map(|(_, v)| *v)
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min);
    let zero_hz_ratio = near_zero / smallest_true;

    let symbol = sys.symbol_duration;
    let grid: Vec<f64> = (0..spec.delay_points).map(|i| i as f64 * symbol / spec.delay_points as f64).collect();
    let phis: Vec<f64> = estimate.paths.iter().map(|p| p.spatial_freq).collect();
    let delay_profiles = match &estimate.delay {
        Some(d) => delay_profiles(d, &reference, &phis, symbol, &grid)?,
        None => Vec::new(),
    };
    Ok(SpectrumShapes { truth, estimate, conventional, delay_profiles, zero_hz_ratio, conventional_peak_hz })
}

/// `tau_s,path_0,path_1,...`; all profiles must share one axis.
pub fn write_delay_csv<W: Write>(profiles: &[SpectrumTrace], mut w: W) -> Result<()> {
    let Some(first) = profiles.first() else {
        return Err(invalid("no delay profiles to write"));
    };
    if profiles.iter().any(|p| p.axis != first.axis) {
        return Err(invalid("delay profiles must share one axis"));
    }
    let header: Vec<String> = (0..profiles.len()).map(|l| format!("path_{l}")).collect();
    writeln!(w, "tau_s,{}", header.join(","))?;
    for (i, tau) in first.axis.iter().enumerate() {
        let row: Vec<String> = profiles.iter().map(|p| p.values[i].to_string()).collect();
        writeln!(w, "{tau},{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::C64;
    use crate::signal::{OffsetTrace, Path};

    #[test]
    fn baseline_sees_static_peak_and_offsets_blur_it() {
        let cfg = SystemConfig::reference();
        let statics = (0..3).map(|i| Path::new(C64::new(1.0, 0.0), 0.0, 0.1e-6 * i as f64, 0.3 * i as f64, &cfg)).collect();
        let dynamic = vec![Path::new(C64::new(0.3, 0.0), 120.0, 0.2e-6, 0.2, &cfg)];
        let paths = PathSet { dynamic, static_: statics };
        let y = synthesize_csi(&cfg, &paths, &OffsetTrace::zero(128), None).unwrap();
        let grid: Vec<f64> = (0..601).map(|i| -300.0 + i as f64).collect();
        let trace = conventional_music(&y, 1, 0, 30, 2, &grid).unwrap();
        let best = (0..grid.len()).max_by(|&a, &b| trace.values[a].total_cmp(&trace.values[b])).unwrap();
        assert!(grid[best].abs() < 2.0 || (grid[best] - 120.0).abs() < 2.0);
        assert!(trace.value_near(0.0) > 1e3 * trace.value_near(-200.0));
        assert!(conventional_music(&y, 1, 0, 30, 30, &grid).is_err());
    }

    #[test]
    fn delay_csv_layout() {
        let a = SpectrumTrace { axis: vec![0.0, 1e-9], values: vec![1.0, 0.5] };
        let b = SpectrumTrace { axis: vec![0.0, 1e-9], values: vec![0.2, 0.9] };
        let mut out = Vec::new();
        write_delay_csv(&[a.clone(), b], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "tau_s,path_0,path_1");
        assert_eq!(text.lines().count(), 3);
        let c = SpectrumTrace { axis: vec![0.0], values: vec![1.0] };
        assert!(write_delay_csv(&[a, c], &mut Vec::new()).is_err());
    }
}
