//! Doppler estimation: a MUSIC grid search over the temporal D-CSIR with
//! truncated-Taylor basis vectors.
//!
//! For a fixed antenna pair and subcarrier, the D-CSIR at lag `p` is, to
//! second order, a combination of `(w_l^p - 1)` and `(w_l^p - 1)(w_k^p - 1)`
//! with `w_l = exp(j 2 pi T_A f_l)`. Stacking lags `1..=P` over packets gives
//! a matrix whose column space is spanned by those vectors. The candidate
//! basis `b_j(f) = normalise((w^p - 1)^j)` vanishes at `f = 0`, and the
//! normalisation keeps the static (zero-frequency) solution from producing a
//! peak.

use std::f64::consts::TAU;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cis, find_peaks_with_edges, null_space_capped, CMatrix, CVector, Peak, C64, DEFAULT_REL_TOL};
use crate::ratio::{RatioView, SampleChoice};
use crate::signal::{CsiTensor, SystemConfig};

/// Unnormalised basis norms below this are treated as zero.
pub const BASIS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DopplerConfig {
    /// Candidate frequencies in Hz, ascending, without 0.
    pub grid: Vec<f64>,
    /// Highest Taylor order used for the candidate basis (`J`).
    pub taylor_orders: usize,
    /// Number of stacked lags (`P`).
    pub window: usize,
    pub rank_tolerance: f64,
    pub sample: SampleChoice,
}

impl DopplerConfig {
    /// 1 Hz grid over `[-300, 300]` Hz without 0, `J = 2`, the system's
    /// Taylor window, and the strongest denominator cell.
    pub fn for_system(cfg: &SystemConfig) -> Self {
        DopplerConfig {
            grid: uniform_grid(-300.0, 300.0, 601),
            taylor_orders: 2,
            window: cfg.taylor_window,
            rank_tolerance: DEFAULT_REL_TOL,
            sample: SampleChoice::Strongest,
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.grid = grid;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidConfig("Doppler grid is empty".into()));
        }
        if self.grid.contains(&0.0) {
            return Err(Error::InvalidConfig("Doppler grid must exclude 0 Hz".into()));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig("Doppler grid must be strictly ascending".into()));
        }
        if self.taylor_orders == 0 || self.window == 0 {
            return Err(Error::InvalidConfig("Taylor order and window must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_step(&self) -> f64 {
        self.grid
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

/// `count` evenly spaced points on `[lo, hi]` with any exact zero removed.
pub fn uniform_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let step = (hi - lo) / (count.max(2) - 1) as f64;
    (0..count)
        .map(|i| lo + i as f64 * step)
        .map(|f| if f.abs() < 1e-9 * step { 0.0 } else { f })
        .filter(|&f| f != 0.0)
        .collect()
}

fn normalise(v: CVector, candidate: f64) -> Result<CVector> {
    let norm = v.norm();
    if !(norm >= BASIS_FLOOR) {
        return Err(Error::ZeroBasis { candidate, norm });
    }
    Ok(v / C64::new(norm, 0.0))
}

/// Unnormalised `[e^{j 2 pi p T_A f} - 1]_{p = 1..=window}`.
fn raw_step(f: f64, window: usize, interval: f64) -> CVector {
    CVector::from_fn(window, |i, _| cis(TAU * (i + 1) as f64 * interval * f) - 1.0)
}

/// First-order basis `b_1(f)`: normalised `e^{j 2 pi p T_A f} - 1`.
pub fn doppler_basis_b1(f: f64, window: usize, interval: f64) -> Result<CVector> {
    normalise(raw_step(f, window, interval), f)
}

/// Second-order basis `b_2(f, f')`: normalised element-wise product of the
/// two first-order vectors.
pub fn doppler_basis_b2(f: f64, f_other: f64, window: usize, interval: f64) -> Result<CVector> {
    let a = raw_step(f, window, interval);
    let b = raw_step(f_other, window, interval);
    let candidate = if f.abs() < f_other.abs() { f } else { f_other };
    normalise(a.component_mul(&b), candidate)
}

/// Order-`j` basis with all candidates equal: normalised `(e^{j 2 pi p T_A f} - 1)^j`.
pub fn doppler_basis(f: f64, order: u32, window: usize, interval: f64) -> Result<CVector> {
    normalise(raw_step(f, window, interval).map(|v| v.powu(order)), f)
}

/// `P x (M - P)` matrix whose column `m` is `[psi(m, 1), ..., psi(m, P)]`.
#[derive(Debug, Clone)]
pub struct StackedDcsir {
    pub matrix: CMatrix,
    pub antenna: usize,
    pub shift: isize,
    pub subcarrier: usize,
}

pub fn stack_dcsir(y: &CsiTensor, cfg: &DopplerConfig) -> Result<StackedDcsir> {
    let (mc, _, _) = y.dims();
    let window = cfg.window;
    if mc <= window {
        return Err(Error::InvalidConfig(format!(
            "need more packets ({mc}) than the Taylor window ({window})"
        )));
    }
    let (antenna, shift, subcarrier) = cfg.sample.resolve(y);
    let view = RatioView::new(y);
    let ratios: Vec<C64> = (0..mc)
        .map(|m| view.ratio(antenna, shift, m, subcarrier))
        .collect::<Result<_>>()?;
    let matrix = CMatrix::from_fn(window, mc - window, |row, m| ratios[m + row + 1] - ratios[m]);
    Ok(StackedDcsir {
        matrix,
        antenna,
        shift,
        subcarrier,
    })
}

/// Spectrum sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumTrace {
    pub axis: Vec<f64>,
    pub values: Vec<f64>,
}

impl SpectrumTrace {
    /// Value at the grid point nearest to `x`.
    pub fn value_near(&self, x: f64) -> f64 {
        let i = self
            .axis
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.values[i]
    }

    pub fn write_doppler_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "f_hz,spectrum_value")?;
        for (f, v) in self.axis.iter().zip(&self.values) {
            writeln!(w, "{f},{v:e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DopplerEstimate {
    /// Estimated Doppler frequencies in Hz, by descending peak height.
    pub frequencies: Vec<f64>,
    pub peaks: Vec<Peak>,
    pub spectrum: SpectrumTrace,
    pub numerical_rank: usize,
    /// Number of singular vectors treated as signal.
    pub signal_dim: usize,
}

/// Number of Taylor monomials of total degree `1..=orders` in `paths` variables.
pub fn taylor_model_dim(paths: usize, orders: usize) -> usize {
    // C(paths + orders, orders) - 1
    let mut c: usize = 1;
    for i in 1..=orders {
        c = c * (paths + i) / i;
    }
    c - 1
}

/// MUSIC pseudo-spectrum `1 / ||[b_1(f), ..., b_J(f)]^H N||_F^2` over the
/// grid and its `paths` highest local maxima.
///
/// The signal subspace is the smaller of the numerical rank and the number
/// of Taylor monomials up to one order beyond the candidate basis. The exact
/// ratio still carries visible energy at order `J + 1`, which would otherwise
/// leak into the null space and bias the peaks; anything beyond that is
/// left in the null space so that the noise floor cannot swallow it.
pub fn music_doppler(stack: &StackedDcsir, cfg: &DopplerConfig, paths: usize, interval: f64) -> Result<DopplerEstimate> {
    cfg.validate()?;
    if paths == 0 {
        return Err(Error::InvalidConfig("at least one dynamic path is required".into()));
    }
    if stack.matrix.nrows() != cfg.window {
        return Err(Error::InvalidConfig("stack height differs from the configured window".into()));
    }
    let model_dim = taylor_model_dim(paths, cfg.taylor_orders + 1);
    let ns = null_space_capped(&stack.matrix, cfg.rank_tolerance, model_dim);
    if ns.basis.ncols() == 0 {
        return Err(Error::RankDeficient(format!(
            "Doppler stack has no null space (rank {} of {} rows); increase the window or lower the model order",
            ns.numerical_rank,
            cfg.window
        )));
    }
    let null_adj = ns.basis.adjoint();
    let values: Vec<f64> = cfg
        .grid
        .par_iter()
        .map(|&f| -> Result<f64> {
            let mut energy = 0.0;
            for order in 1..=cfg.taylor_orders as u32 {
                let b = doppler_basis(f, order, cfg.window, interval)?;
                energy += (&null_adj * b).norm_squared();
            }
            Ok(1.0 / energy.max(f64::MIN_POSITIVE))
        })
        .collect::<Result<_>>()?;
    let peaks = find_peaks_with_edges(&values, &cfg.grid, paths)?;
    Ok(DopplerEstimate {
        frequencies: peaks.iter().map(|p| p.location).collect(),
        peaks,
        spectrum: SpectrumTrace { axis: cfg.grid.clone(), values },
        numerical_rank: ns.numerical_rank,
        signal_dim: ns.numerical_rank.min(model_dim),
    })
}

/// Stacks the tensor and runs the grid search.
pub fn estimate_doppler(y: &CsiTensor, cfg: &DopplerConfig, paths: usize) -> Result<DopplerEstimate> {
    let stack = stack_dcsir(y, cfg)?;
    music_doppler(&stack, cfg, paths, y.config().packet_interval)
}
