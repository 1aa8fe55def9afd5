use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SystemConfig;
use crate::error::{invalid, Result};
use crate::numerics::{cis, seeded_rng, CVector, C64};

/// Per-element phase progression `2 pi d / lambda * sin(theta)` of a plane
/// wave across a uniform linear array.
pub fn spatial_frequency(aoa: f64, spacing: f64, wavelength: f64) -> Result<f64> {
    if !(wavelength > 0.0) {
        return Err(invalid("wavelength must be positive"));
    }
    Ok(TAU * spacing / wavelength * aoa.sin())
}

/// Inverse of [`spatial_frequency`], clamped to the visible region.
pub fn aoa_from_spatial_frequency(phi: f64, spacing: f64, wavelength: f64) -> f64 {
    (phi * wavelength / (TAU * spacing)).clamp(-1.0, 1.0).asin()
}

/// Array response `[1, e^{j phi}, ..., e^{j (N-1) phi}]`.
pub fn steering_vector(phi: f64, antennas: usize) -> Result<CVector> {
    if antennas == 0 {
        return Err(invalid("steering vector needs at least one antenna"));
    }
    Ok(CVector::from_fn(antennas, |n, _| cis(n as f64 * phi)))
}

/// One propagation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Path {
    pub gain: C64,
    pub doppler_hz: f64,
    pub delay_s: f64,
    pub aoa_rad: f64,
    /// Derived from the AoA and the array geometry.
    pub spatial_freq: f64,
}

impl Path {
    pub fn new(gain: C64, doppler_hz: f64, delay_s: f64, aoa_rad: f64, cfg: &SystemConfig) -> Self {
        let spatial_freq = TAU * cfg.antenna_spacing / cfg.wavelength * aoa_rad.sin();
        Path {
            gain,
            doppler_hz,
            delay_s,
            aoa_rad,
            spatial_freq,
        }
    }

    /// A path specified directly by spatial frequency; the AoA is derived.
    pub fn from_spatial(gain: C64, doppler_hz: f64, delay_s: f64, phi: f64, cfg: &SystemConfig) -> Self {
        let aoa = aoa_from_spatial_frequency(phi, cfg.antenna_spacing, cfg.wavelength);
        Path {
            gain,
            doppler_hz,
            delay_s,
            aoa_rad: aoa,
            spatial_freq: phi,
        }
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        if !(self.gain.re.is_finite() && self.gain.im.is_finite()) {
            return Err(invalid("path gain must be finite"));
        }
        if !(0.0..cfg.symbol_duration).contains(&self.delay_s) {
            return Err(invalid(format!(
                "path delay {} s outside [0, T = {} s)",
                self.delay_s, cfg.symbol_duration
            )));
        }
        if self.aoa_rad.abs() > FRAC_PI_2 + 1e-12 {
            return Err(invalid(format!("AoA {} rad outside [-pi/2, pi/2]", self.aoa_rad)));
        }
        let phi = spatial_frequency(self.aoa_rad, cfg.antenna_spacing, cfg.wavelength)?;
        if (phi - self.spatial_freq).abs() > 1e-9 * (1.0 + phi.abs()) {
            return Err(invalid(format!(
                "spatial frequency {} inconsistent with AoA (expected {phi})",
                self.spatial_freq
            )));
        }
        if !self.doppler_hz.is_finite() {
            return Err(invalid("Doppler must be finite"));
        }
        Ok(())
    }
}

/// Dynamic (moving-target) and static propagation paths of a channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSet {
    pub dynamic: Vec<Path>,
    #[serde(rename = "static")]
    pub static_: Vec<Path>,
}

impl PathSet {
    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        if self.static_.is_empty() {
            return Err(invalid("at least one static path is required"));
        }
        for p in &self.static_ {
            p.validate(cfg)?;
            if p.doppler_hz != 0.0 {
                return Err(invalid("static paths must have zero Doppler"));
            }
        }
        for p in &self.dynamic {
            p.validate(cfg)?;
            if p.doppler_hz == 0.0 {
                return Err(invalid("dynamic paths must have non-zero Doppler"));
            }
        }
        Ok(())
    }

    pub fn max_dynamic_gain(&self) -> f64 {
        self.dynamic.iter().map(|p| p.gain.norm()).fold(0.0, f64::max)
    }

    /// Same paths with every gain multiplied by `c`.
    pub fn scaled(&self, c: C64) -> PathSet {
        let scale = |v: &Vec<Path>| {
            v.iter()
                .map(|p| Path {
                    gain: p.gain * c,
                    ..p.clone()
                })
                .collect()
        };
        PathSet {
            dynamic: scale(&self.dynamic),
            static_: scale(&self.static_),
        }
    }
}

/// Monte-Carlo channel draw: delays on `[0, 0.4 us]`, Doppler on
/// `[-300, 300] Hz`, AoA on `[-pi/2, pi/2]`, unit-power paths with uniform
/// phase; an optional line-of-sight static path gets extra power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub dynamic_paths: usize,
    pub static_paths: usize,
    /// Power advantage (dB) of a dominant static path, if any.
    #[serde(default)]
    pub los_advantage_db: Option<f64>,
    #[serde(default = "default_max_delay")]
    pub max_delay_s: f64,
    #[serde(default = "default_max_doppler")]
    pub max_doppler_hz: f64,
}

fn default_max_delay() -> f64 {
    0.4e-6
}

fn default_max_doppler() -> f64 {
    300.0
}

impl ScenarioSpec {
    pub fn new(dynamic_paths: usize, static_paths: usize) -> Self {
        ScenarioSpec {
            dynamic_paths,
            static_paths,
            los_advantage_db: None,
            max_delay_s: default_max_delay(),
            max_doppler_hz: default_max_doppler(),
        }
    }

    pub fn with_los(mut self, advantage_db: f64) -> Self {
        self.los_advantage_db = Some(advantage_db);
        self
    }

    pub fn draw(&self, cfg: &SystemConfig, seed: u64) -> Result<PathSet> {
        if self.static_paths == 0 {
            return Err(invalid("scenario needs at least one static path"));
        }
        let mut rng = seeded_rng(seed);
        let path = |rng: &mut rand_chacha::ChaCha8Rng, amplitude: f64, dynamic: bool| {
            let doppler = if dynamic {
                loop {
                    let f = rng.random_range(-self.max_doppler_hz..=self.max_doppler_hz);
                    if f != 0.0 {
                        break f;
                    }
                }
            } else {
                0.0
            };
            let delay = rng.random_range(0.0..=self.max_delay_s);
            let aoa = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
            let gain = C64::from_polar(amplitude, rng.random_range(-PI..PI));
            Path::new(gain, doppler, delay, aoa, cfg)
        };
        let dynamic = (0..self.dynamic_paths)
            .map(|_| path(&mut rng, 1.0, true))
            .collect();
        let static_ = (0..self.static_paths)
            .map(|i| {
                let amp = match (i, self.los_advantage_db) {
                    (0, Some(db)) => 10f64.powf(db / 20.0),
                    _ => 1.0,
                };
                path(&mut rng, amp, false)
            })
            .collect();
        let set = PathSet { dynamic, static_ };
        set.validate(cfg)?;
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_6;

    #[test]
    fn spatial_frequency_examples() {
        let lambda = 0.1;
        let d = lambda / 2.0;
        assert_eq!(spatial_frequency(0.0, d, lambda).unwrap(), 0.0);
        assert!((spatial_frequency(FRAC_PI_2, d, lambda).unwrap() - PI).abs() < 1e-12);
        assert!((spatial_frequency(FRAC_PI_6, d, lambda).unwrap() - FRAC_PI_2).abs() < 1e-12);
        assert!(spatial_frequency(0.3, d, 0.0).is_err());
        assert!(spatial_frequency(0.3, d, -1.0).is_err());
    }

    #[test]
    fn steering_vector_examples() {
        let close = |a: &CVector, b: &[C64]| {
            a.iter().zip(b).all(|(x, y)| (x - y).norm() < 1e-12)
        };
        let one = C64::new(1.0, 0.0);
        let j = C64::new(0.0, 1.0);
        assert!(close(&steering_vector(0.0, 4).unwrap(), &[one; 4]));
        assert!(close(&steering_vector(PI, 2).unwrap(), &[one, -one]));
        assert!(close(&steering_vector(FRAC_PI_2, 4).unwrap(), &[one, j, -one, -j]));
        assert!(steering_vector(0.1, 0).is_err());
    }

    #[test]
    fn path_set_invariants() {
        let cfg = SystemConfig::reference();
        let stat = Path::new(C64::new(1.0, 0.0), 0.0, 0.1e-6, 0.2, &cfg);
        let dynm = Path::new(C64::new(1.0, 0.0), 50.0, 0.1e-6, 0.2, &cfg);
        PathSet { dynamic: vec![dynm.clone()], static_: vec![stat.clone()] }
            .validate(&cfg)
            .unwrap();
        assert!(PathSet { dynamic: vec![], static_: vec![] }.validate(&cfg).is_err());
        assert!(PathSet { dynamic: vec![stat.clone()], static_: vec![stat.clone()] }
            .validate(&cfg)
            .is_err());
        assert!(PathSet { dynamic: vec![], static_: vec![dynm.clone()] }
            .validate(&cfg)
            .is_err());
        let late = Path::new(C64::new(1.0, 0.0), 0.0, 1e-6, 0.2, &cfg);
        assert!(PathSet { dynamic: vec![], static_: vec![late] }.validate(&cfg).is_err());
        let mut bad_phi = stat.clone();
        bad_phi.spatial_freq += 0.1;
        assert!(bad_phi.validate(&cfg).is_err());
    }

    #[test]
    fn scenario_draws_within_ranges() {
        let cfg = SystemConfig::reference();
        let spec = ScenarioSpec::new(3, 5).with_los(10.0);
        for seed in 0..20 {
            let set = spec.draw(&cfg, seed).unwrap();
            assert_eq!(set.dynamic.len(), 3);
            assert_eq!(set.static_.len(), 5);
            for p in set.dynamic.iter().chain(&set.static_) {
                assert!(p.delay_s <= 0.4e-6);
                assert!(p.doppler_hz.abs() <= 300.0);
            }
            assert!((set.static_[0].gain.norm() - 10f64.sqrt()).abs() < 1e-12);
            assert!((set.static_[1].gain.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(spec.draw(&cfg, 4).unwrap(), spec.draw(&cfg, 4).unwrap());
    }
}
