use std::f64::consts::TAU;

use super::{OffsetTrace, Path, PathSet, SystemConfig};
use crate::error::{invalid, Result};
use crate::numerics::{cis, complex_gaussian, seeded_rng, CMatrix, C64};

/// Frequency-domain received samples `y_n[m, g]`, stored packet-major, then
/// subcarrier, then antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiTensor {
    config: SystemConfig,
    data: Vec<C64>,
    /// Mean power, cached because every ratio floor needs it.
    power: f64,
}

fn mean_power_of(data: &[C64]) -> f64 {
    data.iter().map(|v| v.norm_sqr()).sum::<f64>() / data.len().max(1) as f64
}

impl CsiTensor {
    pub fn from_raw(config: SystemConfig, data: Vec<C64>) -> Result<Self> {
        config.validate()?;
        let (m, g, n) = config.dims();
        if data.len() != m * g * n {
            return Err(invalid(format!(
                "tensor holds {} samples but config implies {m} x {g} x {n}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(invalid("tensor contains non-finite samples"));
        }
        let power = mean_power_of(&data);
        Ok(CsiTensor { config, data, power })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    /// `(M, G, N)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.config.dims()
    }

    #[inline]
    fn offset(&self, m: usize, g: usize, n: usize) -> usize {
        let (_, gc, nc) = self.dims();
        (m * gc + g) * nc + n
    }

    #[inline]
    pub fn get(&self, m: usize, g: usize, n: usize) -> C64 {
        self.data[self.offset(m, g, n)]
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn rms(&self) -> f64 {
        self.power.sqrt()
    }

    pub fn mean_power(&self) -> f64 {
        self.power
    }

    pub fn map(&self, f: impl Fn(usize, usize, usize, C64) -> C64) -> CsiTensor {
        let (mc, gc, nc) = self.dims();
        let mut data = Vec::with_capacity(self.data.len());
        for m in 0..mc {
            for g in 0..gc {
                for n in 0..nc {
                    data.push(f(m, g, n, self.get(m, g, n)));
                }
            }
        }
        let power = mean_power_of(&data);
        CsiTensor {
            config: self.config.clone(),
            data,
            power,
        }
    }
}

/// Common phase the clock offsets impose on packet `m`, subcarrier `g`:
/// `exp(j 2 pi m T_A f_O[m]) * exp(-j 2 pi (g / T) tau_O[m])`.
pub fn offset_factor(cfg: &SystemConfig, offsets: &OffsetTrace, m: usize, g: usize) -> C64 {
    let cfo_phase = TAU * m as f64 * cfg.packet_interval * offsets.cfo[m];
    let to_phase = -TAU * g as f64 / cfg.symbol_duration * offsets.timing_offset[m];
    cis(cfo_phase + to_phase)
}

/// Contribution of one path (offset-free) at `(m, g, n)`.
#[inline]
pub fn path_term(cfg: &SystemConfig, p: &Path, m: usize, g: usize, n: usize) -> C64 {
    p.gain
        * cis(n as f64 * p.spatial_freq + TAU * m as f64 * cfg.packet_interval * p.doppler_hz
            - TAU * g as f64 / cfg.symbol_duration * p.delay_s)
}

/// Offset-free static component `S_n[g]` as a `G x N` matrix.
pub fn static_component(paths: &PathSet, cfg: &SystemConfig) -> CMatrix {
    let (_, gc, nc) = cfg.dims();
    CMatrix::from_fn(gc, nc, |g, n| {
        paths.static_.iter().map(|p| path_term(cfg, p, 0, g, n)).sum()
    })
}

/// Offset-free dynamic component `D_n[m, g]`.
pub fn dynamic_component(paths: &PathSet, cfg: &SystemConfig, m: usize, g: usize, n: usize) -> C64 {
    paths.dynamic.iter().map(|p| path_term(cfg, p, m, g, n)).sum()
}

/// Separable phase tables for one path: antenna, packet, and subcarrier terms.
struct PathTables {
    gain: C64,
    antenna: Vec<C64>,
    packet: Vec<C64>,
    subcarrier: Vec<C64>,
}

impl PathTables {
    fn new(cfg: &SystemConfig, p: &Path) -> Self {
        let (mc, gc, nc) = cfg.dims();
        PathTables {
            gain: p.gain,
            antenna: (0..nc).map(|n| cis(n as f64 * p.spatial_freq)).collect(),
            packet: (0..mc)
                .map(|m| cis(TAU * m as f64 * cfg.packet_interval * p.doppler_hz))
                .collect(),
            subcarrier: (0..gc)
                .map(|g| cis(-TAU * g as f64 / cfg.symbol_duration * p.delay_s))
                .collect(),
        }
    }
}

/// Synthesizes the received frequency-domain CSI of the asynchronous uplink:
/// `y_n[m,g] = (D_n[m,g] + S_n[g]) * offset_factor(m, g) + w`.
///
/// Noise is added only when `config.snr_db` is set; its variance is the mean
/// noiseless per-sample power divided by `10^(snr_db / 10)`, and a seed is
/// then required.
pub fn synthesize_csi(
    config: &SystemConfig,
    paths: &PathSet,
    offsets: &OffsetTrace,
    noise_seed: Option<u64>,
) -> Result<CsiTensor> {
    config.validate()?;
    paths.validate(config)?;
    let (mc, gc, nc) = config.dims();
    offsets.validate(mc)?;

    let tables: Vec<PathTables> = paths
        .dynamic
        .iter()
        .chain(&paths.static_)
        .map(|p| PathTables::new(config, p))
        .collect();

    let mut data = Vec::with_capacity(mc * gc * nc);
    for m in 0..mc {
        for g in 0..gc {
            let factor = offset_factor(config, offsets, m, g);
            for n in 0..nc {
                let clean: C64 = tables
                    .iter()
                    .map(|t| t.gain * t.antenna[n] * t.packet[m] * t.subcarrier[g])
                    .sum();
                data.push(clean * factor);
            }
        }
    }

    if let Some(snr_db) = config.snr_db {
        let seed = noise_seed.ok_or_else(|| invalid("a noise seed is required when snr_db is set"))?;
        let power = data.iter().map(|v| v.norm_sqr()).sum::<f64>() / data.len() as f64;
        let variance = power / 10f64.powf(snr_db / 10.0);
        let mut rng = seeded_rng(seed);
        for v in data.iter_mut() {
            *v += complex_gaussian(&mut rng, variance);
        }
    }

    CsiTensor::from_raw(config.clone(), data)
}
