//! TOML run configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use csir::harness::{ConvergenceSpec, SpectrumSpec, SweepSpec};
use csir::numerics::C64;
use csir::pipeline::EstimatorConfig;
use csir::delay::PairingMethod;
use csir::doppler::uniform_grid;
use csir::signal::{OffsetModel, Path as SignalPath, PathSet, ScenarioSpec, SystemConfig, SPEED_OF_LIGHT};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub channel: Option<ChannelSection>,
    #[serde(default)]
    pub offsets: Option<OffsetModel>,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub spectrum: Option<SpectrumSpec>,
    #[serde(default)]
    pub convergence: Option<ConvergenceSpec>,
}

/// Overrides on top of the reference system. The antenna spacing follows
/// the carrier at half a wavelength.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub antenna_count: Option<usize>,
    pub subcarrier_count: Option<usize>,
    pub packet_count: Option<usize>,
    pub taylor_window: Option<usize>,
    pub symbol_duration: Option<f64>,
    pub cp_duration: Option<f64>,
    pub packet_interval: Option<f64>,
    pub carrier_freq: Option<f64>,
    pub snr_db: Option<f64>,
}

impl SystemSection {
    pub fn resolve(&self) -> Result<SystemConfig, CliError> {
        let mut cfg = SystemConfig::reference();
        if let Some(v) = self.antenna_count {
            cfg.antenna_count = v;
        }
        if let Some(v) = self.subcarrier_count {
            cfg.subcarrier_count = v;
        }
        if let Some(v) = self.packet_count {
            cfg.packet_count = v;
        }
        if let Some(v) = self.taylor_window {
            cfg.taylor_window = v;
        }
        if let Some(v) = self.symbol_duration {
            cfg.symbol_duration = v;
        }
        if let Some(v) = self.cp_duration {
            cfg.cp_duration = v;
        }
        if let Some(v) = self.packet_interval {
            cfg.packet_interval = v;
        }
        if let Some(v) = self.carrier_freq {
            cfg.carrier_freq = v;
            cfg.wavelength = SPEED_OF_LIGHT / v;
            cfg.antenna_spacing = cfg.wavelength / 2.0;
        }
        cfg.snr_db = self.snr_db;
        cfg.validate().map_err(|e| CliError::Input(format!("[system]: {e}")))?;
        Ok(cfg)
    }
}

/// One explicit path; AoA in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathEntry {
    pub gain_re: f64,
    #[serde(default)]
    pub gain_im: f64,
    #[serde(default)]
    pub doppler_hz: f64,
    pub delay_s: f64,
    pub aoa_deg: f64,
}

/// Either a random `scenario` drawn with the run seed, or explicit
/// `dynamic` and `static` path lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub dynamic: Vec<PathEntry>,
    #[serde(default, rename = "static")]
    pub static_paths: Vec<PathEntry>,
}

impl ChannelSection {
    pub fn paths(&self, cfg: &SystemConfig, seed: u64) -> Result<PathSet, CliError> {
        let explicit = !self.dynamic.is_empty() || !self.static_paths.is_empty();
        let set = match (&self.scenario, explicit) {
            (Some(_), true) => {
                return Err(CliError::Input("[channel]: give either `scenario` or explicit paths, not both".into()))
            }
            (Some(s), false) => s.draw(cfg, seed),
            (None, _) => {
                let build = |entries: &[PathEntry]| -> Vec<SignalPath> {
                    entries
                        .iter()
                        .map(|p| {
                            SignalPath::new(C64::new(p.gain_re, p.gain_im), p.doppler_hz, p.delay_s, p.aoa_deg.to_radians(), cfg)
                        })
                        .collect()
                };
                let set = PathSet { dynamic: build(&self.dynamic), static_: build(&self.static_paths) };
                set.validate(cfg).map(|_| set)
            }
        };
        set.map_err(|e| CliError::Input(format!("[channel]: {e}")))
    }

    /// Dynamic path count this channel will have.
    pub fn dynamic_count(&self) -> usize {
        match &self.scenario {
            Some(s) => s.dynamic_paths,
            None => self.dynamic.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Overrides on top of the estimator defaults for the system.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    /// Number of dynamic paths to estimate; defaults to the channel's.
    pub paths: Option<usize>,
    pub doppler_grid: Option<GridSection>,
    pub aoa_grid_points: Option<usize>,
    pub pairing: Option<PairingMethod>,
    pub refine_sweeps: Option<usize>,
    pub extra_candidates: Option<usize>,
    pub doppler_floor_hz: Option<f64>,
}

impl EstimatorSection {
    pub fn resolve(&self, sys: &SystemConfig) -> Result<EstimatorConfig, CliError> {
        let mut cfg = EstimatorConfig::for_system(sys);
        if let Some(g) = &self.doppler_grid {
            cfg.doppler.grid = uniform_grid(g.lo, g.hi, g.count);
        }
        if let Some(points) = self.aoa_grid_points {
            cfg.aoa.grid = csir::aoa::spatial_grid(points);
        }
        if let Some(p) = self.pairing {
            cfg.pairing = p;
        }
        if let Some(s) = self.refine_sweeps {
            cfg.refine_sweeps = s;
        }
        if let Some(e) = self.extra_candidates {
            cfg.extra_candidates = e;
        }
        if let Some(f) = self.doppler_floor_hz {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(CliError::Input(format!("[estimator]: doppler_floor_hz must be finite and >= 0, got {f}")));
            }
            cfg.doppler_floor_hz = Some(f);
        }
        cfg.doppler.validate().map_err(|e| CliError::Input(format!("[estimator]: {e}")))?;
        cfg.aoa.validate().map_err(|e| CliError::Input(format!("[estimator]: {e}")))?;
        Ok(cfg)
    }
}

/// The parsed file plus the hash of its bytes.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    use sha2::{Digest, Sha256};
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig =
        toml::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
    let sha256 = format!("{:x}", Sha256::digest(text.as_bytes()));
    Ok(LoadedConfig { config, sha256 })
}

impl RunConfig {
    /// `--seed` replaces the run seed and every study seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(s) = self.sweep.as_mut() {
            s.seed = seed;
        }
        if let Some(s) = self.spectrum.as_mut() {
            s.seed = seed;
        }
        if let Some(s) = self.convergence.as_mut() {
            s.seed = seed;
        }
    }

    pub fn offsets(&self) -> OffsetModel {
        self.offsets.clone().unwrap_or(OffsetModel::Zero)
    }
}
