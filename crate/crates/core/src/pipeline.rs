//! Doppler, AoA (with the trivial-solution guard), pairing, and delay, run
//! in sequence on one tensor.
//!
//! Estimators see only the tensor and configuration. The optional static
//! reference is the single declared way in for outside knowledge.

use serde::{Deserialize, Serialize};

use crate::aoa::{music_aoa, stack_manifold, AoaConfig, GuardReport};
use crate::delay::{
    default_doppler_floor, default_packets, joint_from_field, multi_delay_ls, pair_by_residual, pair_doppler_aoa, refine_doppler,
    multi_path_residual, refine_paths, select_by_residual, static_prime_field, MultiDelayEstimate, PairedPath, PairedPathEstimates, PairingMethod, StaticReference,
    MAX_RESIDUAL_PAIRING_PATHS,
};
use crate::doppler::{estimate_doppler, DopplerConfig, SpectrumTrace};
use crate::error::Result;
use crate::numerics::{find_peaks_circular, find_peaks_with_edges, wrap_pi, CMatrix};
use crate::signal::{aoa_from_spatial_frequency, CsiTensor, SystemConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub doppler: DopplerConfig,
    pub aoa: AoaConfig,
    /// Packets for the delay LS systems; spread over the frame by default.
    #[serde(default)]
    pub delay_packets: Option<Vec<usize>>,
    /// Largest tolerated gap (rad) between the paired AoA differences and
    /// the ones the delay LS fit sees before a path is flagged.
    #[serde(default = "default_pairing_tolerance")]
    pub pairing_tolerance: f64,
    /// Refine a single path's Doppler within one grid step by minimising
    /// the ratio-model residual.
    #[serde(default = "default_refine")]
    pub refine_doppler: bool,
    /// Residual pairing falls back to spectral above
    /// [`MAX_RESIDUAL_PAIRING_PATHS`] paths.
    #[serde(default = "default_pairing")]
    pub pairing: PairingMethod,
    /// Coordinate-descent sweeps refining every paired path's Doppler and
    /// spatial frequency within one grid step. Zero disables it.
    #[serde(default = "default_sweeps")]
    pub refine_sweeps: usize,
    /// Relative ratio-model residual above which every paired path is
    /// flagged `high-model-residual`.
    #[serde(default = "default_residual_warning")]
    pub residual_warning: f64,
    /// When the residual stays above `residual_warning`, retry with this
    /// many extra spectrum peaks per estimator and keep the best subset.
    #[serde(default = "default_extra_candidates")]
    pub extra_candidates: usize,
    /// Residual refinement and the candidate search keep Dopplers at least
    /// this far from 0 Hz, where the ratio model cannot tell a dynamic path
    /// from a static one. Half the frame's Doppler resolution when unset.
    #[serde(default)]
    pub doppler_floor_hz: Option<f64>,
}

fn default_residual_warning() -> f64 {
    1e-2
}

fn default_extra_candidates() -> usize {
    2
}

fn default_pairing() -> PairingMethod {
    PairingMethod::Residual
}

fn default_sweeps() -> usize {
    3
}

fn default_refine() -> bool {
    true
}

fn default_pairing_tolerance() -> f64 {
    0.05
}

impl EstimatorConfig {
    pub fn for_system(cfg: &SystemConfig) -> Self {
        EstimatorConfig {
            doppler: DopplerConfig::for_system(cfg),
            aoa: AoaConfig::for_system(cfg),
            delay_packets: None,
            pairing_tolerance: default_pairing_tolerance(),
            refine_doppler: default_refine(),
            pairing: default_pairing(),
            refine_sweeps: default_sweeps(),
            residual_warning: default_residual_warning(),
            extra_candidates: default_extra_candidates(),
            doppler_floor_hz: None,
        }
    }
}

/// Which delay estimator produced the delays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayBranch {
    /// AoA MUSIC, pairing, and the multi-delay LS.
    Paired,
    /// Joint single-path AoA and delay from the static-prime field.
    Joint,
}

/// One JSON record per path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub path_id: usize,
    pub f_d_hz: f64,
    /// Doppler at the MUSIC peak, before any refinement.
    pub f_d_music_hz: f64,
    pub spatial_freq: f64,
    pub theta_deg: f64,
    /// Absolute delay in `[0, T)`; `None` without a static reference.
    pub tau_s: Option<f64>,
    /// Delay relative to path 0.
    pub relative_tau_s: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSet {
    pub paths: Vec<PathRecord>,
    pub branch: Option<DelayBranch>,
    pub guard: Option<GuardReport>,
    pub pairing: Option<PairedPathEstimates>,
    pub doppler_spectrum: Option<SpectrumTrace>,
    pub aoa_spectrum: Option<SpectrumTrace>,
    /// Ratio-model residual after pairing and refinement.
    pub model_residual: Option<f64>,
    /// Multi-delay LS output of the paired branch.
    pub delay: Option<MultiDelayEstimate>,
    /// First estimator error; earlier stages' outputs are kept.
    pub failure: Option<String>,
}

impl EstimateSet {
    pub(crate) fn empty() -> Self {
        EstimateSet {
            paths: Vec::new(),
            branch: None,
            guard: None,
            pairing: None,
            doppler_spectrum: None,
            aoa_spectrum: None,
            model_residual: None,
            delay: None,
            failure: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

/// Runs the full chain. Never returns `Err`: a failing stage is recorded in
/// `failure` and whatever was estimated before it is kept.
pub fn estimate_paths(
    y: &CsiTensor,
    cfg: &EstimatorConfig,
    paths: usize,
    reference: Option<&CMatrix>,
) -> EstimateSet {
    let mut out = EstimateSet::empty();
    if let Err(e) = run(y, cfg, paths, reference, &mut out) {
        out.failure = Some(e.to_string());
    }
    out
}

fn run(
    y: &CsiTensor,
    cfg: &EstimatorConfig,
    paths: usize,
    reference: Option<&CMatrix>,
    out: &mut EstimateSet,
) -> Result<()> {
    let sys = y.config().clone();
    let floor = cfg.doppler_floor_hz.unwrap_or_else(|| default_doppler_floor(&sys));
    let doppler = estimate_doppler(y, &cfg.doppler, paths)?;
    out.doppler_spectrum = Some(doppler.spectrum.clone());
    let mut frequencies = doppler.frequencies.clone();
    if cfg.refine_doppler && paths == 1 {
        frequencies[0] = refine_doppler(y, frequencies[0], cfg.doppler.grid_step(), floor)?;
    }
    out.paths = frequencies
        .iter()
        .zip(&doppler.frequencies)
        .enumerate()
        .map(|(i, (&f, &music))| PathRecord {
            path_id: i,
            f_d_hz: f,
            f_d_music_hz: music,
            spatial_freq: f64::NAN,
            theta_deg: f64::NAN,
            tau_s: None,
            relative_tau_s: 0.0,
            flags: Vec::new(),
        })
        .collect();

    let manifold = stack_manifold(y, cfg.aoa.window, cfg.aoa.packet, cfg.aoa.subcarrier)?;
    let aoa = music_aoa(&manifold, y, &cfg.aoa, paths);
    let packets = match &cfg.delay_packets {
        Some(p) => p.clone(),
        None => default_packets(&sys, paths + 2)?,
    };

    let aoa = match aoa {
        Ok(a) => a,
        Err(e) if paths != 1 => return Err(e),
        Err(_) => return joint(y, &sys, &packets, reference, out, vec!["aoa-music-failed".into()]),
    };
    out.aoa_spectrum = Some(aoa.spectrum.clone());
    out.guard = Some(aoa.guard.clone());
    if !aoa.trusted {
        for p in &mut out.paths {
            p.spatial_freq = aoa.spatial_freqs[0];
            p.theta_deg = aoa.aoas[0].to_degrees();
        }
        return joint(y, &sys, &packets, reference, out, vec!["aoa-untrusted".into()]);
    }

    let mut pairs = match cfg.pairing {
        PairingMethod::Residual if paths <= MAX_RESIDUAL_PAIRING_PATHS => {
            pair_by_residual(y, &frequencies, &aoa.spatial_freqs)?
        }
        _ => pair_doppler_aoa(&manifold, y, &frequencies, &aoa.spatial_freqs)?,
    };
    let refine = |pairs: &mut PairedPathEstimates| -> Result<()> {
        if cfg.refine_sweeps > 0 {
            pairs.paths =
                refine_paths(
                    y,
                    &pairs.paths,
                    cfg.doppler.grid_step(),
                    cfg.aoa.grid_step(),
                    cfg.refine_sweeps,
                    floor,
                )?;
        }
        Ok(())
    };
    refine(&mut pairs)?;
    let mut residual = multi_path_residual(y, &pairs.paths)?;
    let mut searched = false;
    if residual > cfg.residual_warning && cfg.extra_candidates > 0 {
        let wanted = paths + cfg.extra_candidates;
        let mut dopplers = candidate_peaks(&doppler.spectrum, paths, wanted, None);
        // extra peaks next to 0 Hz would win on the degenerate residual
        dopplers.retain(|f| f.abs() >= floor || doppler.frequencies.contains(f));
        let aoas = candidate_peaks(&aoa.spectrum, paths, wanted, Some(std::f64::consts::TAU));
        if dopplers.len() > paths || aoas.len() > paths {
            if let Ok(mut alt) = select_by_residual(y, &dopplers, &aoas, paths) {
                refine(&mut alt)?;
                let alt_residual = multi_path_residual(y, &alt.paths)?;
                if alt_residual < residual {
                    pairs = alt;
                    residual = alt_residual;
                    searched = true;
                }
            }
        }
    }
    for (record, pair) in out.paths.iter_mut().zip(&pairs.paths) {
        record.f_d_hz = pair.doppler_hz;
        if searched {
            record.flags.push("candidate-search".into());
        }
        if residual > cfg.residual_warning {
            record.flags.push("high-model-residual".into());
        }
    }
    out.model_residual = Some(residual);
    for (record, pair) in out.paths.iter_mut().zip(&pairs.paths) {
        record.spatial_freq = pair.spatial_freq;
        record.theta_deg = pair.aoa_rad.to_degrees();
    }
    out.pairing = Some(pairs.clone());
    out.branch = Some(DelayBranch::Paired);
    let delays = multi_delay_ls(y, &pairs, &packets, reference.map(StaticReference::Oracle))?;
    for (l, record) in out.paths.iter_mut().enumerate() {
        record.relative_tau_s = delays.relative_delays_s[l];
        record.tau_s = delays.delays_s.as_ref().map(|d| d[l]);
        if record.tau_s.is_none() {
            record.flags.push("delay-relative-only".into());
        }
        let paired_gap = pairs.paths[l].spatial_freq - pairs.paths[0].spatial_freq;
        if wrap_pi(delays.relative_spatial_freqs[l] - paired_gap).abs() > cfg.pairing_tolerance {
            record.flags.push("pairing-disagreement".into());
        }
    }
    out.delay = Some(delays);
    Ok(())
}

/// Up to `wanted` highest peaks of a spectrum, at least `needed`.
fn candidate_peaks(trace: &SpectrumTrace, needed: usize, wanted: usize, period: Option<f64>) -> Vec<f64> {
    (needed..=wanted)
        .rev()
        .find_map(|count| {
            let peaks = match period {
                Some(p) => find_peaks_circular(&trace.values, &trace.axis, count, p),
                None => find_peaks_with_edges(&trace.values, &trace.axis, count),
            };
            peaks.ok()
        })
        .map(|peaks| peaks.iter().map(|p| p.location).collect())
        .unwrap_or_default()
}

fn joint(
    y: &CsiTensor,
    sys: &SystemConfig,
    packets: &[usize],
    reference: Option<&CMatrix>,
    out: &mut EstimateSet,
    flags: Vec<String>,
) -> Result<()> {
    out.branch = Some(DelayBranch::Joint);
    for p in &mut out.paths {
        p.flags.extend(flags.iter().cloned());
        p.flags.push("joint-estimator".into());
    }
    let f = out.paths[0].f_d_hz;
    let field = static_prime_field(y, f, packets)?;
    let record = &mut out.paths[0];
    match reference {
        Some(s) => {
            let est = joint_from_field(&field, StaticReference::Oracle(s), sys)?;
            record.spatial_freq = est.spatial_freq;
            record.theta_deg = est.aoa_rad.to_degrees();
            record.tau_s = Some(est.delay_s);
        }
        None => {
            if let Some(phi) = field.spatial_freq() {
                record.spatial_freq = phi;
                record.theta_deg =
                    aoa_from_spatial_frequency(phi, sys.antenna_spacing, sys.wavelength).to_degrees();
            }
            record.flags.push("delay-relative-only".into());
        }
    }
    out.pairing = Some(PairedPathEstimates {
        paths: vec![PairedPath {
            doppler_hz: f,
            spatial_freq: record.spatial_freq,
            aoa_rad: record.theta_deg.to_radians(),
            score: f64::NAN,
        }],
        assignment: vec![0],
        total_score: f64::NAN,
    });
    Ok(())
}
