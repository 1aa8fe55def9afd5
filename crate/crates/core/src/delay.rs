//! Delay estimation from CSI ratios once Doppler (and, for several paths,
//! AoA) estimates are known.
//!
//! With the dynamic terms normalised by the denominator antenna's first
//! path, a ratio reads
//!
//! `xi(m) = (A + sum_l beta_l e^{j q phi_l} W_l(m)) / (B + sum_l beta_l W_l(m))`
//!
//! with `W_l(m) = e^{j 2 pi m T_A f_l}`, `beta_1 = 1`, and `B = S_k / c_{k,1}`
//! where `c_{k,1} = alpha_1 e^{j k phi_1} e^{-j 2 pi g tau_1 / T}` is path 1's
//! term at denominator antenna `k`. The phase of `B / S_k` is a plane in
//! `(g, k)` whose slopes are `2 pi tau_1 / T` and `-phi_1`. The static
//! component `S_k[g]` has to come from outside the ratios: a common delay
//! shift can always be traded against the timing offset.

use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aoa::{aoa_basis_d1, SpatialManifold};
use crate::doppler::{doppler_basis_b1, SpectrumTrace};
use crate::error::{Error, Result};
use crate::numerics::{cis, max_weight_assignment, pinv_solve, wrap_pi, CMatrix, CVector, C64};
use crate::ratio::RatioView;
use crate::signal::{aoa_from_spatial_frequency, CsiTensor, SystemConfig};

/// Systems above this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e8;

/// Minimum number of windows averaged in expectation mode.
pub const MIN_EXPECTATION_WINDOWS: usize = 2;

/// `count` packets spread evenly over `[0, packet_count - 1]`.
pub fn spread_packets(packet_count: usize, count: usize) -> Result<Vec<usize>> {
    if count < 2 || count > packet_count {
        return Err(Error::InvalidConfig(format!(
            "cannot spread {count} packets over {packet_count}"
        )));
    }
    let step = (packet_count - 1) as f64 / (count - 1) as f64;
    Ok((0..count).map(|i| (i as f64 * step).round() as usize).collect())
}

/// Default LS packets: as many as fit with gaps above the lag window, and
/// never fewer than `unknowns`.
pub fn default_packets(cfg: &SystemConfig, unknowns: usize) -> Result<Vec<usize>> {
    let fit = 1 + (cfg.packet_count - 1) / (cfg.taylor_window + 1);
    spread_packets(cfg.packet_count, fit.max(unknowns))
}

/// Numerator antenna and shift used with denominator antenna `k`.
pub fn neighbour(denominator: usize, antennas: usize) -> (usize, isize) {
    if denominator + 1 < antennas {
        (denominator + 1, 1)
    } else {
        (denominator - 1, -1)
    }
}

fn packet_phase(cfg: &SystemConfig, m: usize, doppler_hz: f64) -> C64 {
    cis(TAU * m as f64 * cfg.packet_interval * doppler_hz)
}

fn check_packets(packets: &[usize], unknowns: usize, y: &CsiTensor) -> Result<()> {
    let (mc, _, _) = y.dims();
    if packets.len() < unknowns {
        return Err(Error::InvalidConfig(format!(
            "{unknowns} unknowns need at least {unknowns} packets, got {}",
            packets.len()
        )));
    }
    if let Some(&m) = packets.iter().find(|&&m| m >= mc) {
        return Err(Error::InvalidConfig(format!("packet {m} out of range (M = {mc})")));
    }
    let mut sorted = packets.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig("LS packets must be distinct".into()));
    }
    Ok(())
}

/// Single-path ratio system at one antenna pair and subcarrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticPrime {
    /// `S'_n = S_n / c_{n,1}`.
    pub numerator: C64,
    /// `S'_{n-q} = S_{n-q} / c_{n-q,1}`.
    pub denominator: C64,
    /// `e^{j q phi_1}`, estimated jointly.
    pub phase_factor: C64,
    pub condition: f64,
}

impl StaticPrime {
    /// Ratio predicted at packet `m`.
    pub fn predict(&self, cfg: &SystemConfig, m: usize, doppler_hz: f64) -> C64 {
        let w = packet_phase(cfg, m, doppler_hz);
        self.phase_factor * (self.numerator + w) / (self.denominator + w)
    }
}

fn single_path_system(
    y: &CsiTensor,
    antenna: usize,
    shift: isize,
    subcarrier: usize,
    packets: &[usize],
    doppler_hz: f64,
) -> Result<(CMatrix, CVector)> {
    let view = RatioView::new(y);
    let cfg = y.config();
    let mut a = CMatrix::zeros(packets.len(), 3);
    let mut b = CVector::zeros(packets.len());
    for (row, &m) in packets.iter().enumerate() {
        let xi = view.ratio(antenna, shift, m, subcarrier)?;
        let w = packet_phase(cfg, m, doppler_hz);
        a[(row, 0)] = C64::new(1.0, 0.0);
        a[(row, 1)] = -xi;
        a[(row, 2)] = w;
        b[row] = xi * w;
    }
    Ok((a, b))
}

/// Solves `[1, -xi(m), W(m)] . [c S'_n, S'_{n-q}, c] = xi(m) W(m)` over the
/// given packets, with `c = e^{j q phi_1}` unknown.
pub fn ls_static_prime(
    y: &CsiTensor,
    antenna: usize,
    shift: isize,
    subcarrier: usize,
    packets: &[usize],
    doppler_hz: f64,
) -> Result<StaticPrime> {
    check_packets(packets, 3, y)?;
    let (a, b) = single_path_system(y, antenna, shift, subcarrier, packets, doppler_hz)?;
    let sol = pinv_solve(&a, &b, 0.0)?;
    if !(sol.condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { context: "packet selection", condition: sol.condition });
    }
    let c = sol.x[2];
    Ok(StaticPrime {
        numerator: sol.x[0] / c,
        denominator: sol.x[1],
        phase_factor: c,
        condition: sol.condition,
    })
}

/// Cells used by the Doppler refinement: every antenna at eight spread
/// subcarriers.
fn refinement_cells(y: &CsiTensor) -> Vec<(usize, usize)> {
    let (_, gc, nc) = y.dims();
    let step = (gc / 8).max(1);
    (0..gc).step_by(step).flat_map(|g| (0..nc).map(move |k| (g, k))).collect()
}

/// Relative residual of the single-path ratio model with Doppler `f`, over
/// every packet: zero at the true Doppler on noiseless data.
pub fn single_path_residual(y: &CsiTensor, doppler_hz: f64) -> Result<f64> {
    let (mc, _, nc) = y.dims();
    let packets: Vec<usize> = (0..mc).collect();
    let cells = refinement_cells(y);
    let terms: Vec<(f64, f64)> = cells
        .par_iter()
        .map(|&(g, k)| {
            let (n, q) = neighbour(k, nc);
            let (a, b) = single_path_system(y, n, q, g, &packets, doppler_hz)?;
            let sol = pinv_solve(&a, &b, 0.0)?;
            Ok((sol.residual * sol.residual, b.norm_squared()))
        })
        .collect::<Result<_>>()?;
    let (res, norm): (f64, f64) = terms.iter().fold((0.0, 0.0), |acc, t| (acc.0 + t.0, acc.1 + t.1));
    Ok((res / norm.max(f64::MIN_POSITIVE)).sqrt())
}

/// Golden-section minimisation of `objective` on `[lo, hi]`.
fn golden_section(lo: f64, hi: f64, tol: f64, mut objective: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (objective(c)?, objective(d)?);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = objective(d)?;
        }
    }
    Ok((a + b) / 2.0)
}

/// Search interval of half-width `half_width` around `doppler_hz` that
/// stays on its side of 0 Hz and no closer to it than `floor_hz`, or than
/// the start when that is closer already.
///
/// The ratio model is degenerate at 0 Hz: a dynamic path there is a static
/// one, and the residual falls towards zero whatever the data. Residual
/// searches must not be allowed to slide into that band.
fn doppler_interval(doppler_hz: f64, half_width: f64, floor_hz: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (doppler_hz - half_width, doppler_hz + half_width);
    let floor = floor_hz.min(doppler_hz.abs()).max(1e-3 * half_width);
    if doppler_hz > 0.0 {
        lo = lo.max(floor);
    } else {
        hi = hi.min(-floor);
    }
    (lo, hi.max(lo))
}

/// Half the Doppler resolution of the frame. Within it of 0 Hz a dynamic
/// path is hard to tell from a static one.
pub fn default_doppler_floor(cfg: &SystemConfig) -> f64 {
    0.5 / (cfg.packet_count as f64 * cfg.packet_interval)
}

/// Refines a single-path Doppler estimate within `half_width` Hz by
/// minimising [`single_path_residual`]. The interval never crosses 0 Hz and
/// never comes nearer to it than `floor_hz`.
pub fn refine_doppler(y: &CsiTensor, doppler_hz: f64, half_width: f64, floor_hz: f64) -> Result<f64> {
    let (lo, hi) = doppler_interval(doppler_hz, half_width, floor_hz);
    golden_section(lo, hi, 1e-7 * half_width, |f| single_path_residual(y, f))
}

/// `S'_k[g]` for every antenna `k` and subcarrier `g`, as a `G x N` matrix.
#[derive(Debug, Clone)]
pub struct StaticPrimeField {
    pub values: CMatrix,
    /// Per-cell estimates of `e^{j phi_1}`; empty when the field was not
    /// produced by the single-path solve.
    pub steering: Vec<C64>,
    pub worst_condition: f64,
}

impl StaticPrimeField {
    /// Spatial frequency from the jointly estimated phase factors. Needs no
    /// static reference.
    pub fn spatial_freq(&self) -> Option<f64> {
        if self.steering.is_empty() {
            return None;
        }
        Some(self.steering.iter().map(|c| c / c.norm()).sum::<C64>().arg())
    }
}

/// Single-path field: each antenna is the denominator of its neighbour pair.
pub fn static_prime_field(y: &CsiTensor, doppler_hz: f64, packets: &[usize]) -> Result<StaticPrimeField> {
    let (_, gc, nc) = y.dims();
    let cells: Vec<(usize, usize)> = (0..gc).flat_map(|g| (0..nc).map(move |k| (g, k))).collect();
    let solved: Vec<StaticPrime> = cells
        .par_iter()
        .map(|&(g, k)| {
            let (n, q) = neighbour(k, nc);
            ls_static_prime(y, n, q, g, packets, doppler_hz)
        })
        .collect::<Result<_>>()?;
    let mut values = CMatrix::zeros(gc, nc);
    let mut steering = Vec::with_capacity(cells.len());
    let mut worst_condition: f64 = 0.0;
    for (&(g, k), s) in cells.iter().zip(&solved) {
        // neighbour pairs place k in the denominator
        values[(g, k)] = s.denominator;
        let (_, q) = neighbour(k, nc);
        steering.push(if q > 0 { s.phase_factor } else { s.phase_factor.conj() });
        worst_condition = worst_condition.max(s.condition);
    }
    Ok(StaticPrimeField { values, steering, worst_condition })
}

/// Phase plane `a + b g + c k` fitted to a `G x N` field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePlane {
    pub intercept: f64,
    /// Radians per subcarrier.
    pub slope_subcarrier: f64,
    /// Radians per antenna.
    pub slope_antenna: f64,
    /// Weighted RMS of the wrapped phase residual.
    pub rms_residual: f64,
}

/// Fits the phase of `field` without unwrapping: each slope is the angle
/// of the weighted sum of neighbour phasor products
/// `w[i] w[i+1] u[i+1] conj(u[i])`, `u = field / |field|`.
///
/// A phase term shared by several fields shifts every fitted slope by the
/// same amount, so differences between fields stay exact even where that
/// term is far from planar.
pub fn fit_phase_plane(field: &CMatrix, weights: &DMatrix<f64>) -> Result<PhasePlane> {
    let (gc, nc) = field.shape();
    if gc < 2 || nc < 1 {
        return Err(Error::InvalidConfig("phase plane needs at least two subcarriers".into()));
    }
    if weights.shape() != field.shape() {
        return Err(Error::InvalidConfig("phase plane weights must match the field".into()));
    }
    if field.iter().any(|v| !(v.norm() > 0.0) || !v.norm().is_finite())
        || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite())
    {
        return Err(Error::InvalidConfig("phase plane input has zero or non-finite entries".into()));
    }
    let unit = field.map(|v| v / v.norm());
    let mut along_g = C64::new(0.0, 0.0);
    let mut along_k = C64::new(0.0, 0.0);
    for k in 0..nc {
        for g in 0..gc {
            if g + 1 < gc {
                along_g += weights[(g, k)] * weights[(g + 1, k)] * unit[(g + 1, k)] * unit[(g, k)].conj();
            }
            if k + 1 < nc {
                along_k += weights[(g, k)] * weights[(g, k + 1)] * unit[(g, k + 1)] * unit[(g, k)].conj();
            }
        }
    }
    let slope_subcarrier = along_g.arg();
    let slope_antenna = if nc > 1 { along_k.arg() } else { 0.0 };
    let plane = |g: usize, k: usize| slope_subcarrier * g as f64 + slope_antenna * k as f64;
    let mut offset = C64::new(0.0, 0.0);
    for k in 0..nc {
        for g in 0..gc {
            offset += weights[(g, k)] * unit[(g, k)] * cis(-plane(g, k));
        }
    }
    let intercept = offset.arg();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..nc {
        for g in 0..gc {
            let r = wrap_pi(unit[(g, k)].arg() - intercept - plane(g, k));
            num += weights[(g, k)] * r * r;
            den += weights[(g, k)];
        }
    }
    Ok(PhasePlane {
        intercept,
        slope_subcarrier,
        slope_antenna,
        rms_residual: if den > 0.0 { (num / den).sqrt() } else { 0.0 },
    })
}

/// Magnitudes of a field, used as fit weights.
pub fn magnitude_weights(field: &CMatrix) -> DMatrix<f64> {
    field.map(|v| v.norm())
}

/// Delay in `[0, T)` from a subcarrier phase slope of `2 pi tau / T`.
pub fn delay_from_slope(slope: f64, symbol_duration: f64) -> f64 {
    let tau = (slope / TAU * symbol_duration).rem_euclid(symbol_duration);
    if tau >= symbol_duration { 0.0 } else { tau }
}

/// Where the static component `S_k[g]` comes from.
#[derive(Debug, Clone, Copy)]
pub enum StaticReference<'a> {
    /// Known offset-free static component, `G x N`.
    Oracle(&'a CMatrix),
    /// Average of `S'` over several windows.
    Expectation(&'a ExpectationReference),
}

impl StaticReference<'_> {
    fn matrix(&self) -> &CMatrix {
        match self {
            StaticReference::Oracle(m) => m,
            StaticReference::Expectation(e) => &e.static_estimate,
        }
    }
}

/// `S_n[g]` taken as the mean of `S'_n[g]` over windows.
///
/// Ratios cannot pin an absolute delay, so delays estimated against this
/// reference are relative to whatever reference phase the average settles
/// on. Useful for tracking changes, not for absolute range.
#[derive(Debug, Clone)]
pub struct ExpectationReference {
    pub static_estimate: CMatrix,
    pub windows: usize,
    /// Median over cells of the smallest arc covering that cell's `S'`
    /// phases across windows.
    pub phase_excursion: f64,
}

/// Smallest arc of the circle containing every angle.
fn covering_arc(angles: &[f64]) -> f64 {
    if angles.len() < 2 {
        return 0.0;
    }
    let mut a: Vec<f64> = angles.iter().map(|x| x.rem_euclid(TAU)).collect();
    a.sort_by(f64::total_cmp);
    let mut largest_gap = a[0] + TAU - a[a.len() - 1];
    for w in a.windows(2) {
        largest_gap = largest_gap.max(w[1] - w[0]);
    }
    TAU - largest_gap
}

pub fn expectation_reference(fields: &[StaticPrimeField]) -> Result<ExpectationReference> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidConfig("expectation needs at least one window".into()))?;
    let shape = first.values.shape();
    if fields.iter().any(|f| f.values.shape() != shape) {
        return Err(Error::InvalidConfig("windows disagree on the field shape".into()));
    }
    let mut sum = CMatrix::zeros(shape.0, shape.1);
    for f in fields {
        sum += &f.values;
    }
    let static_estimate = sum / C64::new(fields.len() as f64, 0.0);
    let mut arcs: Vec<f64> = (0..shape.0 * shape.1)
        .map(|i| covering_arc(&fields.iter().map(|f| f.values[i].arg()).collect::<Vec<_>>()))
        .collect();
    arcs.sort_by(f64::total_cmp);
    Ok(ExpectationReference {
        static_estimate,
        windows: fields.len(),
        phase_excursion: arcs[arcs.len() / 2],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEstimate {
    pub spatial_freq: f64,
    pub aoa_rad: f64,
    pub delay_s: f64,
    pub plane: PhasePlane,
    /// Set when the reference cannot pin an absolute delay: expectation
    /// mode with fewer than two windows or a phase excursion below `pi`.
    pub identifiability_warning: bool,
    /// The delay is relative to the expectation reference, not absolute.
    pub relative: bool,
}

/// Joint AoA and delay of a single dynamic path from `S' / S`.
pub fn joint_from_field(field: &StaticPrimeField, reference: StaticReference, cfg: &SystemConfig) -> Result<JointEstimate> {
    let s = reference.matrix();
    if s.shape() != field.values.shape() {
        return Err(Error::InvalidConfig(format!(
            "static reference is {:?}, field is {:?}",
            s.shape(),
            field.values.shape()
        )));
    }
    let ratio = field.values.zip_map(s, |a, b| a / b);
    let plane = fit_phase_plane(&ratio, &magnitude_weights(&field.values))?;
    let spatial_freq = wrap_pi(-plane.slope_antenna);
    let (identifiability_warning, relative) = match reference {
        StaticReference::Oracle(_) => (false, false),
        StaticReference::Expectation(e) => {
            (e.windows < MIN_EXPECTATION_WINDOWS || e.phase_excursion < PI, true)
        }
    };
    Ok(JointEstimate {
        spatial_freq,
        aoa_rad: aoa_from_spatial_frequency(spatial_freq, cfg.antenna_spacing, cfg.wavelength),
        delay_s: delay_from_slope(plane.slope_subcarrier, cfg.symbol_duration),
        plane,
        identifiability_warning,
        relative,
    })
}

/// Single-path joint estimator on one tensor.
pub fn joint_single_path(
    y: &CsiTensor,
    doppler_hz: f64,
    packets: &[usize],
    reference: StaticReference,
) -> Result<JointEstimate> {
    let field = static_prime_field(y, doppler_hz, packets)?;
    joint_from_field(&field, reference, y.config())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPath {
    pub doppler_hz: f64,
    pub spatial_freq: f64,
    pub aoa_rad: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPathEstimates {
    /// In the order of the Doppler list.
    pub paths: Vec<PairedPath>,
    /// `assignment[l]` is the index into the AoA list paired with Doppler `l`.
    pub assignment: Vec<usize>,
    pub total_score: f64,
}

/// Matched-filter pairing scores `|d_1(phi_l')^H A conj(b_1(f_l))|`.
///
/// The manifold is approximately `sum_l d_1(phi_l) b_1(f_l)^T` plus higher
/// orders, so the row basis is correlated through its conjugate.
pub fn pairing_scores(
    manifold: &SpatialManifold,
    y: &CsiTensor,
    dopplers: &[f64],
    spatial_freqs: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let cfg = y.config();
    let window = manifold.matrix.ncols();
    let rows: Vec<CVector> = spatial_freqs
        .iter()
        .map(|&phi| {
            aoa_basis_d1(phi, y, manifold.packet, manifold.subcarrier).map(|d| manifold.matrix.adjoint() * d)
        })
        .collect::<Result<_>>()?;
    dopplers
        .iter()
        .map(|&f| {
            let b = doppler_basis_b1(f, window, cfg.packet_interval)?;
            Ok(rows.iter().map(|r| r.dotc(&b.conjugate()).norm()).collect())
        })
        .collect()
}

pub fn pair_doppler_aoa(
    manifold: &SpatialManifold,
    y: &CsiTensor,
    dopplers: &[f64],
    spatial_freqs: &[f64],
) -> Result<PairedPathEstimates> {
    if dopplers.len() != spatial_freqs.len() || dopplers.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "pairing needs equal non-empty lists, got {} Dopplers and {} AoAs",
            dopplers.len(),
            spatial_freqs.len()
        )));
    }
    let scores = pairing_scores(manifold, y, dopplers, spatial_freqs)?;
    let assignment = max_weight_assignment(&scores);
    let cfg = y.config();
    let paths: Vec<PairedPath> = assignment
        .iter()
        .enumerate()
        .map(|(l, &a)| PairedPath {
            doppler_hz: dopplers[l],
            spatial_freq: spatial_freqs[a],
            aoa_rad: aoa_from_spatial_frequency(spatial_freqs[a], cfg.antenna_spacing, cfg.wavelength),
            score: scores[l][a],
        })
        .collect();
    Ok(PairedPathEstimates {
        total_score: paths.iter().map(|p| p.score).sum(),
        paths,
        assignment,
    })
}

/// How Doppler and AoA estimates are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMethod {
    /// Hungarian assignment on the matched-filter manifold scores.
    Spectral,
    /// Exhaustive search for the assignment whose multi-path ratio model
    /// leaves the smallest residual.
    Residual,
}

/// Largest path count the exhaustive residual pairing accepts.
pub const MAX_RESIDUAL_PAIRING_PATHS: usize = 6;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Ratio samples at the refinement cells, shared across residual
/// evaluations.
struct RatioCells {
    /// `(antenna shift, xi over every packet)` per cell.
    cells: Vec<(isize, Vec<C64>)>,
}

impl RatioCells {
    fn new(y: &CsiTensor) -> Result<Self> {
        let (mc, _, nc) = y.dims();
        let view = RatioView::new(y);
        let cells = refinement_cells(y)
            .into_iter()
            .map(|(g, k)| {
                let (n, q) = neighbour(k, nc);
                let xi = (0..mc).map(|m| view.ratio(n, q, m, g)).collect::<Result<_>>()?;
                Ok((q, xi))
            })
            .collect::<Result<_>>()?;
        Ok(RatioCells { cells })
    }

    fn residual(&self, cfg: &SystemConfig, pairs: &[PairedPath]) -> Result<f64> {
        let paths = pairs.len();
        let packets = self.cells.first().map_or(0, |c| c.1.len());
        let phases: Vec<Vec<C64>> = pairs
            .iter()
            .map(|p| (0..packets).map(|m| packet_phase(cfg, m, p.doppler_hz)).collect())
            .collect();
        let terms: Vec<(f64, f64)> = self
            .cells
            .par_iter()
            .map(|(shift, xi)| {
                let steer: Vec<C64> = pairs.iter().map(|p| cis(*shift as f64 * p.spatial_freq)).collect();
                let a = CMatrix::from_fn(packets, paths + 1, |m, c| match c {
                    0 => C64::new(1.0, 0.0),
                    1 => -xi[m],
                    _ => phases[c - 1][m] * (steer[c - 1] - xi[m]),
                });
                let b = CVector::from_fn(packets, |m, _| phases[0][m] * (xi[m] - steer[0]));
                let (q, r) = a.clone().qr().unpack();
                let residual = match r.solve_upper_triangular(&(q.adjoint() * &b)) {
                    Some(x) if x.iter().all(|v| v.is_finite()) => (&a * x - &b).norm(),
                    _ => pinv_solve(&a, &b, 0.0)?.residual,
                };
                Ok((residual * residual, b.norm_squared()))
            })
            .collect::<Result<_>>()?;
        let (res, norm) = terms.iter().fold((0.0, 0.0), |acc, t| (acc.0 + t.0, acc.1 + t.1));
        Ok((res / f64::max(norm, f64::MIN_POSITIVE)).sqrt())
    }
}

/// Relative residual of the multi-path ratio model over the refinement
/// cells and every packet. Zero for exact parameters on noiseless data.
pub fn multi_path_residual(y: &CsiTensor, pairs: &[PairedPath]) -> Result<f64> {
    RatioCells::new(y)?.residual(y.config(), pairs)
}

/// Pairs by minimum model residual. `score` holds each assignment's
/// residual, so lower is better here.
pub fn pair_by_residual(y: &CsiTensor, dopplers: &[f64], spatial_freqs: &[f64]) -> Result<PairedPathEstimates> {
    let paths = dopplers.len();
    if paths != spatial_freqs.len() || paths == 0 {
        return Err(Error::InvalidConfig(format!(
            "pairing needs equal non-empty lists, got {} Dopplers and {} AoAs",
            paths,
            spatial_freqs.len()
        )));
    }
    if paths > MAX_RESIDUAL_PAIRING_PATHS {
        return Err(Error::InvalidConfig(format!(
            "residual pairing supports at most {MAX_RESIDUAL_PAIRING_PATHS} paths"
        )));
    }
    let cfg = y.config();
    let build = |assignment: &[usize]| -> Vec<PairedPath> {
        assignment
            .iter()
            .enumerate()
            .map(|(l, &a)| PairedPath {
                doppler_hz: dopplers[l],
                spatial_freq: spatial_freqs[a],
                aoa_rad: aoa_from_spatial_frequency(spatial_freqs[a], cfg.antenna_spacing, cfg.wavelength),
                score: 0.0,
            })
            .collect()
    };
    let ratios = RatioCells::new(y)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for assignment in permutations(paths) {
        let residual = ratios.residual(cfg, &build(&assignment))?;
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, assignment));
        }
    }
    let (residual, assignment) = best.expect("at least one permutation");
    let mut chosen = build(&assignment);
    for p in &mut chosen {
        p.score = residual;
    }
    Ok(PairedPathEstimates { paths: chosen, assignment, total_score: residual })
}

/// Largest number of candidate combinations [`select_by_residual`] will
/// evaluate.
pub const MAX_CANDIDATE_COMBINATIONS: usize = 5000;

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if n < k {
        return Vec::new();
    }
    let mut out = combinations(n - 1, k);
    for mut c in combinations(n - 1, k - 1) {
        c.push(n - 1);
        out.push(c);
    }
    out
}

/// Picks `paths` Dopplers and `paths` spatial frequencies out of larger
/// candidate lists, plus their pairing, by minimum model residual.
/// `assignment[l]` indexes `spatial_freqs`.
pub fn select_by_residual(
    y: &CsiTensor,
    dopplers: &[f64],
    spatial_freqs: &[f64],
    paths: usize,
) -> Result<PairedPathEstimates> {
    if paths == 0 || dopplers.len() < paths || spatial_freqs.len() < paths {
        return Err(Error::InvalidConfig(format!(
            "need at least {paths} candidates each, got {} Dopplers and {} AoAs",
            dopplers.len(),
            spatial_freqs.len()
        )));
    }
    let doppler_sets = combinations(dopplers.len(), paths);
    let aoa_orders: Vec<Vec<usize>> = combinations(spatial_freqs.len(), paths)
        .into_iter()
        .flat_map(|subset| permutations(paths).into_iter().map(move |p| p.iter().map(|&i| subset[i]).collect()))
        .collect();
    let total = doppler_sets.len() * aoa_orders.len();
    if total > MAX_CANDIDATE_COMBINATIONS {
        return Err(Error::InvalidConfig(format!(
            "{total} candidate combinations exceed the limit of {MAX_CANDIDATE_COMBINATIONS}"
        )));
    }
    let cfg = y.config();
    let build = |fs: &[usize], order: &[usize]| -> Vec<PairedPath> {
        fs.iter()
            .zip(order)
            .map(|(&fi, &a)| PairedPath {
                doppler_hz: dopplers[fi],
                spatial_freq: spatial_freqs[a],
                aoa_rad: aoa_from_spatial_frequency(spatial_freqs[a], cfg.antenna_spacing, cfg.wavelength),
                score: 0.0,
            })
            .collect()
    };
    let ratios = RatioCells::new(y)?;
    let mut best: Option<(f64, Vec<PairedPath>, Vec<usize>)> = None;
    for fs in &doppler_sets {
        for order in &aoa_orders {
            let trial = build(fs, order);
            let residual = ratios.residual(cfg, &trial)?;
            if best.as_ref().is_none_or(|(r, _, _)| residual < *r) {
                best = Some((residual, trial, order.clone()));
            }
        }
    }
    let (residual, mut chosen, assignment) = best.expect("at least one combination");
    for p in &mut chosen {
        p.score = residual;
    }
    Ok(PairedPathEstimates { paths: chosen, assignment, total_score: residual })
}

/// Coordinate descent on every path's Doppler and spatial frequency,
/// minimising [`multi_path_residual`] within the given half-widths. Dopplers
/// keep the same distance from 0 Hz as [`refine_doppler`].
pub fn refine_paths(
    y: &CsiTensor,
    pairs: &[PairedPath],
    doppler_half_width: f64,
    spatial_half_width: f64,
    sweeps: usize,
    doppler_floor_hz: f64,
) -> Result<Vec<PairedPath>> {
    let cfg = y.config();
    let ratios = RatioCells::new(y)?;
    let mut current = pairs.to_vec();
    for _ in 0..sweeps {
        for l in 0..current.len() {
            let (lo, hi) = doppler_interval(current[l].doppler_hz, doppler_half_width, doppler_floor_hz);
            let f = golden_section(lo, hi, 1e-4 * doppler_half_width, |f| {
                let mut trial = current.clone();
                trial[l].doppler_hz = f;
                ratios.residual(cfg, &trial)
            })?;
            current[l].doppler_hz = f;
            let phi0 = current[l].spatial_freq;
            let phi = golden_section(
                phi0 - spatial_half_width,
                phi0 + spatial_half_width,
                1e-4 * spatial_half_width,
                |phi| {
                    let mut trial = current.clone();
                    trial[l].spatial_freq = phi;
                    ratios.residual(cfg, &trial)
                },
            )?;
            current[l].spatial_freq = wrap_pi(phi);
            current[l].aoa_rad = aoa_from_spatial_frequency(current[l].spatial_freq, cfg.antenna_spacing, cfg.wavelength);
        }
    }
    Ok(current)
}

/// Solves the `(L + 1)`-unknown system at one cell for
/// `[A, B, beta_2, ..., beta_L]`, with Dopplers and AoAs known:
///
/// `A - xi B + sum_{l>=2} beta_l W_l (e^{j q phi_l} - xi) = W_1 (xi - e^{j q phi_1})`.
pub fn multi_delay_cell(
    y: &CsiTensor,
    pairs: &[PairedPath],
    packets: &[usize],
    antenna: usize,
    shift: isize,
    subcarrier: usize,
) -> Result<(CVector, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("at least one paired path is required".into()));
    }
    check_packets(packets, pairs.len() + 1, y)?;
    let (a, b) = multi_path_system(y, pairs, packets, antenna, shift, subcarrier)?;
    let sol = pinv_solve(&a, &b, 0.0)?;
    if !(sol.condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { context: "packet selection", condition: sol.condition });
    }
    Ok((sol.x, sol.condition))
}

fn multi_path_system(
    y: &CsiTensor,
    pairs: &[PairedPath],
    packets: &[usize],
    antenna: usize,
    shift: isize,
    subcarrier: usize,
) -> Result<(CMatrix, CVector)> {
    let paths = pairs.len();
    let view = RatioView::new(y);
    let cfg = y.config();
    let steer: Vec<C64> = pairs.iter().map(|p| cis(shift as f64 * p.spatial_freq)).collect();
    let mut a = CMatrix::zeros(packets.len(), paths + 1);
    let mut b = CVector::zeros(packets.len());
    for (row, &m) in packets.iter().enumerate() {
        let xi = view.ratio(antenna, shift, m, subcarrier)?;
        a[(row, 0)] = C64::new(1.0, 0.0);
        a[(row, 1)] = -xi;
        for l in 1..paths {
            a[(row, l + 1)] = packet_phase(cfg, m, pairs[l].doppler_hz) * (steer[l] - xi);
        }
        b[row] = packet_phase(cfg, m, pairs[0].doppler_hz) * (xi - steer[0]);
    }
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDelayEstimate {
    /// Absolute delays in `[0, T)`, in pair order; `None` without a static
    /// reference.
    pub delays_s: Option<Vec<f64>>,
    /// `tau_l - tau_1`, in pair order (first entry zero).
    pub relative_delays_s: Vec<f64>,
    /// `phi_l - phi_1` seen in the fitted coefficients, for cross-checking
    /// the pairing.
    pub relative_spatial_freqs: Vec<f64>,
    pub worst_condition: f64,
    /// Per-cell LS solutions `[A, B, beta_2, ..]` as `G x N` fields.
    #[serde(skip)]
    pub coefficients: Vec<CMatrix>,
}

/// Delays of all paired paths: relative delays from the `beta_l` phase
/// slopes, path 1 from `B / S` when a static reference is supplied.
pub fn multi_delay_ls(
    y: &CsiTensor,
    pairs: &PairedPathEstimates,
    packets: &[usize],
    reference: Option<StaticReference>,
) -> Result<MultiDelayEstimate> {
    let (_, gc, nc) = y.dims();
    let paths = pairs.paths.len();
    let cells: Vec<(usize, usize)> = (0..gc).flat_map(|g| (0..nc).map(move |k| (g, k))).collect();
    let solved: Vec<(CVector, f64)> = cells
        .par_iter()
        .map(|&(g, k)| {
            let (n, q) = neighbour(k, nc);
            multi_delay_cell(y, &pairs.paths, packets, n, q, g)
        })
        .collect::<Result<_>>()?;
    let worst_condition = solved.iter().map(|s| s.1).fold(0.0, f64::max);
    let coefficient = |idx: usize| {
        let mut field = CMatrix::zeros(gc, nc);
        for (&(g, k), (x, _)) in cells.iter().zip(&solved) {
            field[(g, k)] = x[idx];
        }
        field
    };
    let symbol = y.config().symbol_duration;
    let mut relative_delays_s = vec![0.0];
    let mut relative_spatial_freqs = vec![0.0];
    for l in 1..paths {
        let beta = coefficient(l + 1);
        let plane = fit_phase_plane(&beta, &magnitude_weights(&beta))?;
        // beta_l carries e^{-j 2 pi g (tau_l - tau_1) / T}
        relative_delays_s.push(wrap_pi(-plane.slope_subcarrier) / TAU * symbol);
        relative_spatial_freqs.push(wrap_pi(plane.slope_antenna));
    }
    let delays_s = match reference {
        None => None,
        Some(r) => {
            let field = StaticPrimeField { values: coefficient(1), steering: Vec::new(), worst_condition };
            let first = joint_from_field(&field, r, y.config())?;
            Some(
                relative_delays_s
                    .iter()
                    .map(|d| (first.delay_s + d).rem_euclid(symbol))
                    .collect(),
            )
        }
    };
    Ok(MultiDelayEstimate {
        delays_s,
        relative_delays_s,
        relative_spatial_freqs,
        worst_condition,
        coefficients: (0..paths + 1).map(coefficient).collect(),
    })
}

/// Delay profile of every path over `delays` (s): the magnitude of the
/// path's LS field, referenced to `S_n[g]` and steered to its spatial
/// frequency, correlated against a delay ramp over subcarriers. Each path
/// gets its own profile over the full symbol, peaking at its delay.
pub fn delay_profiles(
    est: &MultiDelayEstimate,
    reference: &CMatrix,
    spatial_freqs: &[f64],
    symbol_duration: f64,
    delays: &[f64],
) -> Result<Vec<SpectrumTrace>> {
    let paths = est.coefficients.len().saturating_sub(1);
    if paths == 0 || spatial_freqs.len() != paths {
        return Err(Error::InvalidConfig(format!(
            "need {paths} spatial frequencies and a solved estimate, got {}",
            spatial_freqs.len()
        )));
    }
    let first = &est.coefficients[1];
    if reference.shape() != first.shape() {
        return Err(Error::InvalidConfig("reference shape does not match the LS fields".into()));
    }
    let (gc, nc) = first.shape();
    // B conj(S) ~ e^{j 2 pi g tau_1 / T} e^{-j k phi_1}; conj(beta_l) shifts both to path l
    let base = first.zip_map(reference, |b, s| b * s.conj());
    (0..paths)
        .map(|l| {
            let field = if l == 0 { base.clone() } else { est.coefficients[l + 1].map(|b| b.conj()).component_mul(&base) };
            let total: f64 = field.iter().map(|v| v.norm()).sum();
            let values = delays
                .iter()
                .map(|&tau| {
                    let mut acc = C64::new(0.0, 0.0);
                    for g in 0..gc {
                        let ramp = cis(-TAU * g as f64 * tau / symbol_duration);
                        for k in 0..nc {
                            acc += field[(g, k)] * ramp * cis(k as f64 * spatial_freqs[l]);
                        }
                    }
                    acc.norm() / total.max(f64::MIN_POSITIVE)
                })
                .collect();
            Ok(SpectrumTrace { axis: delays.to_vec(), values })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aoa::stack_manifold;
    use crate::signal::{
        generate_offsets, static_component, synthesize_csi, OffsetModel, OffsetTrace, Path, PathSet, ScenarioSpec,
    };

    /// `S_n[g]` as `G x N`, the layout the estimators use.
    fn oracle(cfg: &SystemConfig, paths: &PathSet) -> CMatrix {
        static_component(paths, cfg)
    }

    fn offsets(seed: u64) -> OffsetTrace {
        generate_offsets(&OffsetModel::IidUniform { timing: (0.0, 0.3e-6), cfo: (-100.0, 100.0) }, 128, seed).unwrap()
    }

    fn single(seed: u64) -> (SystemConfig, PathSet, CsiTensor) {
        let cfg = SystemConfig::reference();
        let paths = ScenarioSpec::new(1, 5).draw(&cfg, seed).unwrap();
        let y = synthesize_csi(&cfg, &paths, &offsets(seed), None).unwrap();
        (cfg, paths, y)
    }

    #[test]
    fn refinement_recovers_exact_doppler() {
        let (_, paths, y) = single(15);
        let f = paths.dynamic[0].doppler_hz;
        assert!(single_path_residual(&y, f).unwrap() < 1e-9);
        assert!(single_path_residual(&y, f + 0.3).unwrap() > 1e-4);
        let refined = refine_doppler(&y, f + 0.7, 1.0, 0.0).unwrap();
        assert!((refined - f).abs() < 1e-4, "{refined} vs {f}");
    }

    #[test]
    fn refinement_stays_out_of_the_zero_band() {
        assert_eq!(doppler_interval(1.2, 1.0, 3.9), (1.2, 2.2));
        assert_eq!(doppler_interval(-10.0, 1.0, 3.9), (-11.0, -9.0));
        let (lo, hi) = doppler_interval(-4.5, 1.0, 3.9);
        assert!((lo + 5.5).abs() < 1e-12 && (hi + 3.9).abs() < 1e-12);
        // the residual itself collapses towards 0 Hz on any data
        let (_, _, y) = single(15);
        assert!(single_path_residual(&y, 1e-3).unwrap() < single_path_residual(&y, 20.0).unwrap());
    }

    #[test]
    fn packet_spreading() {
        assert_eq!(spread_packets(128, 5).unwrap(), vec![0, 32, 64, 95, 127]);
        let cfg = SystemConfig::reference();
        assert_eq!(default_packets(&cfg, 3).unwrap().len(), 5);
        assert_eq!(default_packets(&cfg, 7).unwrap().len(), 7);
        assert!(spread_packets(4, 5).is_err());
        assert_eq!(neighbour(0, 4), (1, 1));
        assert_eq!(neighbour(3, 4), (2, -1));
    }

    #[test]
    fn static_prime_reproduces_held_out_ratios() {
        let (cfg, paths, y) = single(3);
        let f = paths.dynamic[0].doppler_hz;
        let s = ls_static_prime(&y, 4, 1, 7, &[0, 40, 80], f).unwrap();
        let view = RatioView::new(&y);
        for m in [17, 101, 127] {
            let observed = view.ratio(4, 1, m, 7).unwrap();
            assert!((s.predict(&cfg, m, f) - observed).norm() <= 1e-8 * observed.norm());
        }
        assert!((s.phase_factor - cis(paths.dynamic[0].spatial_freq)).norm() < 1e-8);
    }

    #[test]
    fn static_prime_scales_inversely_with_gain() {
        let (cfg, paths, _) = single(4);
        let f = paths.dynamic[0].doppler_hz;
        let mut scaled = paths.clone();
        scaled.dynamic[0].gain *= C64::new(0.0, 2.0);
        let a = synthesize_csi(&cfg, &paths, &OffsetTrace::zero(128), None).unwrap();
        let b = synthesize_csi(&cfg, &scaled, &OffsetTrace::zero(128), None).unwrap();
        let pa = ls_static_prime(&a, 2, 1, 3, &[0, 50, 100], f).unwrap();
        let pb = ls_static_prime(&b, 2, 1, 3, &[0, 50, 100], f).unwrap();
        assert!((pb.denominator * C64::new(0.0, 2.0) - pa.denominator).norm() < 1e-8 * pa.denominator.norm());
    }

    #[test]
    fn repeated_packet_rows_are_rejected() {
        let (_, paths, y) = single(5);
        let f = paths.dynamic[0].doppler_hz;
        assert!(ls_static_prime(&y, 1, 1, 0, &[3, 3, 3], f).is_err());
        // Doppler of exactly one period per packet makes every row identical
        let err = ls_static_prime(&y, 1, 1, 0, &[0, 1, 2], 1000.0);
        assert!(matches!(err, Err(Error::IllConditioned { .. })), "{err:?}");
    }

    #[test]
    fn phase_plane_recovers_slopes() {
        let field = CMatrix::from_fn(64, 8, |g, k| cis(0.4 + 2.2 * g as f64 - 0.7 * k as f64) * 3.0);
        let plane = fit_phase_plane(&field, &magnitude_weights(&field)).unwrap();
        assert!((wrap_pi(plane.slope_subcarrier - 2.2)).abs() < 1e-9);
        assert!((plane.slope_antenna + 0.7).abs() < 1e-9);
        assert!(plane.rms_residual < 1e-9);
        assert!((delay_from_slope(TAU * 0.25, 1e-6) - 0.25e-6).abs() < 1e-18);
        assert!((delay_from_slope(-TAU * 0.25, 1e-6) - 0.75e-6).abs() < 1e-15);
    }

    #[test]
    fn trivial_reference_gives_zero_delay_and_angle() {
        let field = StaticPrimeField {
            values: CMatrix::from_element(16, 4, C64::new(2.0, -1.0)),
            steering: Vec::new(),
            worst_condition: 1.0,
        };
        let reference = field.values.clone();
        let est = joint_from_field(&field, StaticReference::Oracle(&reference), &SystemConfig::reference()).unwrap();
        assert!(est.delay_s.abs() < 1e-18 && est.spatial_freq.abs() < 1e-12);
    }

    #[test]
    fn joint_single_path_with_oracle() {
        for seed in [10, 11, 12] {
            let (cfg, paths, y) = single(seed);
            let p = &paths.dynamic[0];
            let packets = default_packets(&cfg, 3).unwrap();
            let s = oracle(&cfg, &paths);
            let est = joint_single_path(&y, p.doppler_hz, &packets, StaticReference::Oracle(&s)).unwrap();
            assert!((est.delay_s - p.delay_s).abs() < 1e-12, "{} vs {}", est.delay_s, p.delay_s);
            assert!(wrap_pi(est.spatial_freq - p.spatial_freq).abs() < 1e-9);
            assert!(!est.identifiability_warning && !est.relative);
            let field = static_prime_field(&y, p.doppler_hz, &packets).unwrap();
            assert!(wrap_pi(field.spatial_freq().unwrap() - p.spatial_freq).abs() < 1e-9);
        }
    }

    #[test]
    fn single_window_expectation_warns() {
        let (cfg, paths, y) = single(13);
        let packets = default_packets(&cfg, 3).unwrap();
        let field = static_prime_field(&y, paths.dynamic[0].doppler_hz, &packets).unwrap();
        let reference = expectation_reference(std::slice::from_ref(&field)).unwrap();
        let est = joint_from_field(&field, StaticReference::Expectation(&reference), &cfg).unwrap();
        assert!(est.identifiability_warning && est.relative);
    }

    #[test]
    fn expectation_tracks_delay_changes() {
        // a slowly moving path: the mean of S' anchors the phase, and the
        // per-window estimates keep the true differences
        let cfg = SystemConfig::reference();
        let base = ScenarioSpec::new(1, 5).draw(&cfg, 21).unwrap();
        let packets = default_packets(&cfg, 3).unwrap();
        let mut fields = Vec::new();
        let mut truth = Vec::new();
        for w in 0..8 {
            let mut paths = base.clone();
            let tau = 0.05e-6 + 0.04e-6 * w as f64;
            let theta = -0.6 + 0.15 * w as f64;
            paths.dynamic[0] = Path::new(paths.dynamic[0].gain, paths.dynamic[0].doppler_hz, tau, theta, &cfg);
            truth.push((tau, paths.dynamic[0].spatial_freq));
            let y = synthesize_csi(&cfg, &paths, &offsets(w), None).unwrap();
            fields.push(static_prime_field(&y, paths.dynamic[0].doppler_hz, &packets).unwrap());
        }
        let reference = expectation_reference(&fields).unwrap();
        assert_eq!(reference.windows, 8);
        let est: Vec<JointEstimate> = fields
            .iter()
            .map(|f| joint_from_field(f, StaticReference::Expectation(&reference), &cfg).unwrap())
            .collect();
        for w in 1..8 {
            let d_est = wrap_pi(TAU * (est[w].delay_s - est[0].delay_s) / cfg.symbol_duration);
            let d_true = TAU * (truth[w].0 - truth[0].0) / cfg.symbol_duration;
            assert!((d_est - d_true).abs() < 1e-9, "window {w}");
            let p_est = wrap_pi(est[w].spatial_freq - est[0].spatial_freq);
            assert!((p_est - wrap_pi(truth[w].1 - truth[0].1)).abs() < 1e-9);
        }
    }

    fn two_path(delays: (f64, f64), seed: u64) -> (SystemConfig, PathSet, CsiTensor) {
        let cfg = SystemConfig::reference();
        let mut paths = ScenarioSpec::new(0, 5).draw(&cfg, seed).unwrap();
        paths.dynamic.push(Path::new(C64::new(1.0, 0.0), -150.0, delays.0, (-40f64).to_radians(), &cfg));
        paths.dynamic.push(Path::new(C64::new(0.0, 1.0), 200.0, delays.1, 25f64.to_radians(), &cfg));
        let y = synthesize_csi(&cfg, &paths, &offsets(seed), None).unwrap();
        (cfg, paths, y)
    }

    #[test]
    fn pairing_recovers_true_assignment() {
        let (cfg, paths, y) = two_path((0.1e-6, 0.3e-6), 30);
        let manifold = stack_manifold(&y, cfg.taylor_window, 0, 0).unwrap();
        let f: Vec<f64> = paths.dynamic.iter().map(|p| p.doppler_hz).collect();
        let phi: Vec<f64> = paths.dynamic.iter().map(|p| p.spatial_freq).collect();
        let swapped = vec![phi[1], phi[0]];
        let direct = pair_doppler_aoa(&manifold, &y, &f, &phi).unwrap();
        let crossed = pair_doppler_aoa(&manifold, &y, &f, &swapped).unwrap();
        assert_eq!(direct.assignment, vec![0, 1]);
        assert_eq!(crossed.assignment, vec![1, 0]);
        assert!((direct.total_score - crossed.total_score).abs() < 1e-12);
        let scores = pairing_scores(&manifold, &y, &f, &phi).unwrap();
        assert!(scores[0][0] + scores[1][1] > scores[0][1] + scores[1][0]);
    }

    #[test]
    fn residual_pairing_and_refinement() {
        let (_, paths, y) = two_path((0.1e-6, 0.3e-6), 32);
        let f: Vec<f64> = paths.dynamic.iter().map(|p| p.doppler_hz).collect();
        let phi: Vec<f64> = paths.dynamic.iter().map(|p| p.spatial_freq).collect();
        let direct = pair_by_residual(&y, &f, &phi).unwrap();
        let crossed = pair_by_residual(&y, &f, &[phi[1], phi[0]]).unwrap();
        assert_eq!(direct.assignment, vec![0, 1]);
        assert_eq!(crossed.assignment, vec![1, 0]);
        assert!(direct.total_score < 1e-9);
        let mut off = direct.paths.clone();
        off[0].doppler_hz += 0.4;
        off[1].spatial_freq -= 0.002;
        assert!(multi_path_residual(&y, &off).unwrap() > 1e-4);
        let refined = refine_paths(&y, &off, 1.0, 0.0035, 3, 0.0).unwrap();
        assert!((refined[0].doppler_hz - f[0]).abs() < 0.01, "{refined:?}");
        assert!((refined[1].spatial_freq - phi[1]).abs() < 1e-4);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(combinations(5, 2).len(), 10);
        let picked = select_by_residual(&y, &[f[1] + 37.0, f[0], f[1]], &[0.9, phi[1], phi[0]], 2).unwrap();
        let mut got: Vec<(f64, f64)> = picked.paths.iter().map(|p| (p.doppler_hz, p.spatial_freq)).collect();
        got.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut want = vec![(f[0], phi[0]), (f[1], phi[1])];
        want.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(got, want);
    }

    #[test]
    fn multi_delay_recovers_both_paths() {
        for delays in [(0.1e-6, 0.3e-6), (0.2e-6, 0.21e-6)] {
            let (cfg, paths, y) = two_path(delays, 31);
            let pairs = PairedPathEstimates {
                paths: paths
                    .dynamic
                    .iter()
                    .map(|p| PairedPath { doppler_hz: p.doppler_hz, spatial_freq: p.spatial_freq, aoa_rad: p.aoa_rad, score: 1.0 })
                    .collect(),
                assignment: vec![0, 1],
                total_score: 2.0,
            };
            let s = oracle(&cfg, &paths);
            let packets = default_packets(&cfg, 3).unwrap();
            let est = multi_delay_ls(&y, &pairs, &packets, Some(StaticReference::Oracle(&s))).unwrap();
            let got = est.delays_s.clone().unwrap();
            assert!((got[0] - delays.0).abs() < 1e-12 && (got[1] - delays.1).abs() < 1e-12, "{got:?}");
            let phi_gap = paths.dynamic[1].spatial_freq - paths.dynamic[0].spatial_freq;
            assert!(wrap_pi(est.relative_spatial_freqs[1] - phi_gap).abs() < 1e-9);
            let grid: Vec<f64> = (0..2000).map(|i| i as f64 * 0.5e-9).collect();
            let phis: Vec<f64> = paths.dynamic.iter().map(|p| p.spatial_freq).collect();
            let profiles = delay_profiles(&est, &s, &phis, cfg.symbol_duration, &grid).unwrap();
            for (trace, truth) in profiles.iter().zip([delays.0, delays.1]) {
                let best = (0..grid.len()).max_by(|&a, &b| trace.values[a].total_cmp(&trace.values[b])).unwrap();
                assert!((grid[best] - truth).abs() <= 0.5e-9, "{} vs {truth}", grid[best]);
                assert!((trace.values[best] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn multi_delay_single_path_matches_joint() {
        let (cfg, paths, y) = single(14);
        let p = &paths.dynamic[0];
        let pairs = PairedPathEstimates {
            paths: vec![PairedPath { doppler_hz: p.doppler_hz, spatial_freq: p.spatial_freq, aoa_rad: p.aoa_rad, score: 1.0 }],
            assignment: vec![0],
            total_score: 1.0,
        };
        let s = oracle(&cfg, &paths);
        let packets = default_packets(&cfg, 3).unwrap();
        let multi = multi_delay_ls(&y, &pairs, &packets, Some(StaticReference::Oracle(&s))).unwrap();
        let joint = joint_single_path(&y, p.doppler_hz, &packets, StaticReference::Oracle(&s)).unwrap();
        assert!((multi.delays_s.unwrap()[0] - joint.delay_s).abs() < 1e-12);
        let no_reference = multi_delay_ls(&y, &pairs, &packets, None).unwrap();
        assert!(no_reference.delays_s.is_none());
    }
}
