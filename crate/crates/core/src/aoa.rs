//! AoA estimation from the spatial D-CSIR manifold.
//!
//! At a fixed packet `m` and subcarrier `g`, the `N x N` matrix
//! `A[n][n'] = psi_{n, n - n'}[m, p, g]` collects the D-CSIR of every antenna
//! pair at lag `p`. Column `n'` uses antenna `n'` as denominator. Vectorising
//! `A` column by column and stacking lags `1..=P` gives the `N^2 x P` matrix
//! whose column space is spanned, to second order, by
//!
//! * `d_1(phi)`: entries `h_{n, n - n'}(phi) e^{j n phi}`
//! * `d_2(phi, phi')`: entries `H_{n, n - n'}(phi, phi') e^{j n (phi + phi')}`
//!
//! evaluated at the dynamic spatial frequencies. The `e^{j n phi}` factors
//! come from writing each antenna's latent amplitude relative to antenna 0.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doppler::SpectrumTrace;
use crate::error::{Error, Result};
use crate::numerics::{
    cis, find_peaks_circular, null_space_capped, numerical_rank, CMatrix, CVector, Peak, C64,
};
use crate::ratio::{general_kernel, RatioView};
use crate::signal::{aoa_from_spatial_frequency, CsiTensor, SystemConfig};

/// Basis vectors whose norm falls below this fraction of the magnitude of
/// the cancelling kernel terms are treated as zero.
pub const BASIS_FLOOR: f64 = 1e-12;

/// Default threshold of the static-equality statistic used by the guard.
pub const DEFAULT_GUARD_THRESHOLD: f64 = 1e-3;

/// Relative singular-value tolerance for the spatial signal subspace.
///
/// Much tighter than the temporal one: the manifold's Taylor tail decays
/// geometrically, and everything above round-off belongs to the signal.
/// With `N(N - 1)` rows against `P` columns a null space survives anyway.
pub const AOA_REL_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AoaConfig {
    /// Candidate spatial frequencies in radians, within `(-pi, pi]`.
    pub grid: Vec<f64>,
    pub taylor_orders: usize,
    pub window: usize,
    pub rank_tolerance: f64,
    /// Packet and subcarrier the manifold and the basis vectors are
    /// anchored at.
    pub packet: usize,
    pub subcarrier: usize,
    pub guard_threshold: f64,
}

impl AoaConfig {
    /// 1801-point uniform spatial-frequency grid, `J = 2`, anchored at
    /// packet 0, subcarrier 0.
    pub fn for_system(cfg: &SystemConfig) -> Self {
        AoaConfig {
            grid: spatial_grid(1801),
            taylor_orders: 2,
            window: cfg.taylor_window,
            rank_tolerance: AOA_REL_TOL,
            packet: 0,
            subcarrier: 0,
            guard_threshold: DEFAULT_GUARD_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 3 {
            return Err(Error::InvalidConfig("AoA grid needs at least 3 points".into()));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig("AoA grid must be strictly ascending".into()));
        }
        if self.grid[0] <= -PI || *self.grid.last().unwrap() > PI {
            return Err(Error::InvalidConfig("AoA grid must lie within (-pi, pi]".into()));
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

/// `count` points uniform on `(-pi, pi]`.
pub fn spatial_grid(count: usize) -> Vec<f64> {
    let step = TAU / count as f64;
    (1..=count).map(|i| -PI + i as f64 * step).collect()
}

/// `A[n][n'] = psi_{n, n - n'}[m, p, g]`; the diagonal is exactly zero.
pub fn build_manifold(y: &CsiTensor, packet: usize, lag: usize, subcarrier: usize) -> Result<CMatrix> {
    let (_, _, nc) = y.dims();
    let view = RatioView::new(y);
    let mut a = CMatrix::zeros(nc, nc);
    for col in 0..nc {
        for row in 0..nc {
            if row != col {
                a[(row, col)] = view.dcsir(row, row as isize - col as isize, packet, lag, subcarrier)?;
            }
        }
    }
    Ok(a)
}

/// Column-major vectorised manifolds for lags `1..=P`, as an `N^2 x P` matrix.
#[derive(Debug, Clone)]
pub struct SpatialManifold {
    pub matrix: CMatrix,
    pub packet: usize,
    pub subcarrier: usize,
}

pub fn stack_manifold(y: &CsiTensor, window: usize, packet: usize, subcarrier: usize) -> Result<SpatialManifold> {
    let (mc, _, nc) = y.dims();
    if packet + window >= mc {
        return Err(Error::InvalidConfig(format!(
            "packet {packet} plus window {window} exceeds the {mc} available packets"
        )));
    }
    let mut matrix = CMatrix::zeros(nc * nc, window);
    for lag in 1..=window {
        let a = build_manifold(y, packet, lag, subcarrier)?;
        for (i, v) in a.iter().enumerate() {
            matrix[(i, lag - 1)] = *v;
        }
    }
    Ok(SpatialManifold { matrix, packet, subcarrier })
}

/// Received samples of every antenna at one packet and subcarrier, with the
/// denominator floor checked.
fn anchor_samples(y: &CsiTensor, packet: usize, subcarrier: usize) -> Result<Vec<C64>> {
    let (_, _, nc) = y.dims();
    let view = RatioView::new(y);
    (0..nc)
        .map(|n| view.pair(n, 0, packet, subcarrier).map(|(v, _)| v))
        .collect()
}

/// Unit-norm order-`phis.len()` spatial basis from anchor samples.
fn raw_basis(samples: &[C64], phis: &[f64]) -> Result<CVector> {
    let nc = samples.len();
    let order = phis.len() as i32;
    let phase_sum: f64 = phis.iter().sum();
    let mut v = CVector::zeros(nc * nc);
    let mut scale = 0.0;
    for col in 0..nc {
        for row in 0..nc {
            if row == col {
                continue;
            }
            let shift = row as isize - col as isize;
            let kernel = general_kernel(samples[row], samples[col], shift, phis)?;
            v[col * nc + row] = kernel * cis(row as f64 * phase_sum);
            scale += (samples[row].norm() / samples[col].norm().powi(order + 1)).powi(2);
        }
    }
    let norm = v.norm();
    if !(norm >= BASIS_FLOOR * scale.sqrt()) {
        return Err(Error::ZeroBasis { candidate: phis[0], norm });
    }
    Ok(v / C64::new(norm, 0.0))
}

fn check_antennas(y: &CsiTensor) -> Result<()> {
    if y.dims().2 < 2 {
        return Err(Error::InvalidConfig("spatial bases need at least two antennas".into()));
    }
    Ok(())
}

/// First-order spatial basis `d_1(phi)`, unit norm, length `N^2`.
pub fn aoa_basis_d1(phi: f64, y: &CsiTensor, packet: usize, subcarrier: usize) -> Result<CVector> {
    check_antennas(y)?;
    let samples = anchor_samples(y, packet, subcarrier)?;
    raw_basis(&samples, &[phi])
}

/// Second-order spatial basis `d_2(phi, phi')`, unit norm, length `N^2`.
pub fn aoa_basis_d2(phi: f64, phi_other: f64, y: &CsiTensor, packet: usize, subcarrier: usize) -> Result<CVector> {
    check_antennas(y)?;
    let samples = anchor_samples(y, packet, subcarrier)?;
    raw_basis(&samples, &[phi, phi_other])
}

/// Order-`order` spatial basis with all candidates equal to `phi`.
pub fn aoa_basis(phi: f64, order: usize, y: &CsiTensor, packet: usize, subcarrier: usize) -> Result<CVector> {
    check_antennas(y)?;
    let samples = anchor_samples(y, packet, subcarrier)?;
    raw_basis(&samples, &vec![phi; order])
}

/// Outcome of the single-path, equal-static-component check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub fired: bool,
    /// Largest deviation of the time-averaged antenna ratio from 1.
    pub dispersion: f64,
    pub threshold: f64,
    pub recommendation: Option<String>,
}

/// Detects the regime where `phi = 0` solves the AoA search trivially: a
/// single dynamic path over static components that are equal on every
/// antenna.
///
/// The statistic is `max_n |mean_m xi_{n,0}[m, g] - 1|`. The time-averaged
/// ratio tends to `S_n / S_0` because the dynamic terms rotate and average
/// out, and unlike raw CSI it is free of the clock offsets.
pub fn trivial_solution_guard(y: &CsiTensor, paths: usize, subcarrier: usize, threshold: f64) -> Result<GuardReport> {
    let (mc, _, nc) = y.dims();
    let view = RatioView::new(y);
    let mut dispersion: f64 = 0.0;
    for n in 1..nc {
        let mut mean = C64::new(0.0, 0.0);
        for m in 0..mc {
            mean += view.ratio(n, n as isize, m, subcarrier)?;
        }
        mean /= mc as f64;
        dispersion = dispersion.max((mean - 1.0).norm());
    }
    let fired = paths == 1 && dispersion < threshold;
    Ok(GuardReport {
        fired,
        dispersion,
        threshold,
        recommendation: fired.then(|| {
            "static components look identical across antennas; use the joint single-path AoA/delay estimator"
                .to_string()
        }),
    })
}

#[derive(Debug, Clone)]
pub struct AoaEstimate {
    /// Estimated spatial frequencies, by descending peak height.
    pub spatial_freqs: Vec<f64>,
    /// Corresponding angles of arrival in radians.
    pub aoas: Vec<f64>,
    pub peaks: Vec<Peak>,
    pub spectrum: SpectrumTrace,
    pub numerical_rank: usize,
    pub signal_dim: usize,
    pub guard: GuardReport,
    /// False when the guard fired; the estimates are then likely the
    /// trivial `phi = 0` solution.
    pub trusted: bool,
}

/// Indices of the off-diagonal entries of a column-major `N x N` matrix.
fn off_diagonal(nc: usize) -> Vec<usize> {
    (0..nc * nc).filter(|i| i % nc != i / nc).collect()
}

fn select_rows(m: &CMatrix, rows: &[usize]) -> CMatrix {
    CMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// MUSIC search over the spatial-frequency grid.
///
/// Only the `N(N - 1)` off-diagonal rows carry data. The signal dimension
/// is the numerical rank, capped at `N(N - 1) - 1` so that a null space is
/// always left to search against.
pub fn music_aoa(
    manifold: &SpatialManifold,
    y: &CsiTensor,
    cfg: &AoaConfig,
    paths: usize,
) -> Result<AoaEstimate> {
    cfg.validate()?;
    check_antennas(y)?;
    let (_, _, nc) = y.dims();
    if paths == 0 {
        return Err(Error::InvalidConfig("at least one dynamic path is required".into()));
    }
    if paths > nc * (nc - 1) {
        return Err(Error::InvalidConfig(format!(
            "{nc} antennas resolve at most {} dynamic paths",
            nc * (nc - 1)
        )));
    }
    let rows = off_diagonal(nc);
    let reduced = select_rows(&manifold.matrix, &rows);
    let max_dim = rows.len() - 1;
    let ns = null_space_capped(&reduced, cfg.rank_tolerance, max_dim);
    if ns.basis.ncols() == 0 {
        return Err(Error::RankDeficient(format!(
            "spatial manifold has no null space (rank {} of {} rows)",
            ns.numerical_rank,
            rows.len()
        )));
    }
    let null_adj = ns.basis.adjoint();
    let samples = anchor_samples(y, manifold.packet, manifold.subcarrier)?;
    let values: Vec<f64> = cfg
        .grid
        .par_iter()
        .map(|&phi| -> Result<f64> {
            let mut energy = 0.0;
            for order in 1..=cfg.taylor_orders {
                let full = raw_basis(&samples, &vec![phi; order])?;
                let d = CVector::from_fn(rows.len(), |r, _| full[rows[r]]);
                energy += (&null_adj * d).norm_squared();
            }
            Ok(1.0 / energy.max(f64::MIN_POSITIVE))
        })
        .collect::<Result<_>>()?;
    let peaks = find_peaks_circular(&values, &cfg.grid, paths, TAU)?;
    let spatial_freqs: Vec<f64> = peaks.iter().map(|p| p.location).collect();
    let cfg_sys = y.config();
    let aoas = spatial_freqs
        .iter()
        .map(|&phi| aoa_from_spatial_frequency(phi, cfg_sys.antenna_spacing, cfg_sys.wavelength))
        .collect();
    let guard = trivial_solution_guard(y, paths, manifold.subcarrier, cfg.guard_threshold)?;
    Ok(AoaEstimate {
        spatial_freqs,
        aoas,
        peaks,
        spectrum: SpectrumTrace { axis: cfg.grid.clone(), values },
        numerical_rank: ns.numerical_rank,
        signal_dim: ns.numerical_rank.min(max_dim),
        trusted: !guard.fired,
        guard,
    })
}

/// Builds the manifold at the configured anchor and runs the search.
pub fn estimate_aoa(y: &CsiTensor, cfg: &AoaConfig, paths: usize) -> Result<AoaEstimate> {
    let manifold = stack_manifold(y, cfg.window, cfg.packet, cfg.subcarrier)?;
    music_aoa(&manifold, y, cfg, paths)
}

/// Numerical ranks of the manifold alone and with `d_1(phi)`, `d_2(phi, phi)`
/// appended. Equal ranks mean both candidates lie in its column space.
pub fn rank_with_candidates(manifold: &SpatialManifold, y: &CsiTensor, phi: f64, rel_tol: f64) -> Result<(usize, usize)> {
    let d1 = aoa_basis_d1(phi, y, manifold.packet, manifold.subcarrier)?;
    let d2 = aoa_basis_d2(phi, phi, y, manifold.packet, manifold.subcarrier)?;
    let a = &manifold.matrix;
    let mut augmented = CMatrix::zeros(a.nrows(), a.ncols() + 2);
    augmented.columns_mut(0, a.ncols()).copy_from(a);
    augmented.set_column(a.ncols(), &d1);
    augmented.set_column(a.ncols() + 1, &d2);
    // compare on a common scale: unit-norm manifold columns
    let scale = |m: &CMatrix| {
        let mut m = m.clone();
        for mut c in m.column_iter_mut() {
            let n = c.norm();
            if n > 0.0 {
                c /= C64::new(n, 0.0);
            }
        }
        m
    };
    let sv_a: Vec<f64> = scale(a).singular_values().iter().copied().collect();
    let sv_aug: Vec<f64> = scale(&augmented).singular_values().iter().copied().collect();
    Ok((numerical_rank(&sv_a, rel_tol), numerical_rank(&sv_aug, rel_tol)))
}

/// CSV with columns `phi_rad,theta_deg,spectrum_value`.
pub fn write_spectrum_csv<W: Write>(trace: &SpectrumTrace, cfg: &SystemConfig, mut w: W) -> Result<()> {
    writeln!(w, "phi_rad,theta_deg,spectrum_value")?;
    for (phi, v) in trace.axis.iter().zip(&trace.values) {
        let theta = aoa_from_spatial_frequency(*phi, cfg.antenna_spacing, cfg.wavelength).to_degrees();
        writeln!(w, "{phi},{theta},{v:e}")?;
    }
    Ok(())
}
