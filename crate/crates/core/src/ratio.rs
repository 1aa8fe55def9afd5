//! CSI ratios between antennas, their packet differences (D-CSIR), and the
//! Taylor-series derivative kernels that linearise the ratio in the dynamic
//! path amplitudes.
//!
//! Index conventions: `antenna` is the numerator antenna `n`, `shift` is the
//! antenna offset `q` so that the denominator antenna is `n - q`, `packet` is
//! `m`, `lag` is the packet gap `p`, and `subcarrier` is `g`.
//!
//! The derivative kernels are evaluated on the received samples, so they
//! carry the unknown clock-offset phase. Estimators fold that phase into the
//! latent amplitudes: the order-`k` derivative of the ratio with respect to
//! the clean path terms equals the kernel times `offset_factor^k`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cis, C64};
use crate::signal::{offset_factor, path_term, CsiTensor, OffsetTrace, PathSet, SystemConfig};

/// Default denominator floor, relative to the tensor RMS.
pub const DEFAULT_FLOOR_REL: f64 = 1e-12;

/// Read-only view over a tensor that evaluates ratios with a denominator floor.
#[derive(Debug, Clone, Copy)]
pub struct RatioView<'a> {
    tensor: &'a CsiTensor,
    floor: f64,
}

impl<'a> RatioView<'a> {
    pub fn new(tensor: &'a CsiTensor) -> Self {
        Self::with_floor(tensor, DEFAULT_FLOOR_REL)
    }

    /// `floor_rel` is multiplied by the tensor RMS.
    pub fn with_floor(tensor: &'a CsiTensor, floor_rel: f64) -> Self {
        RatioView {
            tensor,
            floor: floor_rel * tensor.rms(),
        }
    }

    pub fn tensor(&self) -> &'a CsiTensor {
        self.tensor
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    fn denominator_antenna(&self, antenna: usize, shift: isize) -> Result<usize> {
        let (_, _, nc) = self.tensor.dims();
        let other = antenna as isize - shift;
        if antenna >= nc || other < 0 || other >= nc as isize {
            return Err(Error::InvalidConfig(format!(
                "antenna pair ({antenna}, {other}) outside 0..{nc}"
            )));
        }
        Ok(other as usize)
    }

    fn check_packet(&self, packet: usize, subcarrier: usize) -> Result<()> {
        let (mc, gc, _) = self.tensor.dims();
        if packet >= mc || subcarrier >= gc {
            return Err(Error::InvalidConfig(format!(
                "sample (m = {packet}, g = {subcarrier}) outside {mc} x {gc}"
            )));
        }
        Ok(())
    }

    /// `(y_n, y_{n-q})` at one packet and subcarrier, with the floor enforced.
    pub fn pair(&self, antenna: usize, shift: isize, packet: usize, subcarrier: usize) -> Result<(C64, C64)> {
        let other = self.denominator_antenna(antenna, shift)?;
        self.check_packet(packet, subcarrier)?;
        let den = self.tensor.get(packet, subcarrier, other);
        // squared comparison keeps hypot off the hot path
        if !(den.norm_sqr() > self.floor * self.floor) {
            return Err(Error::DegenerateDenominator {
                antenna: other,
                packet,
                subcarrier,
                magnitude: den.norm(),
                floor: self.floor,
            });
        }
        Ok((self.tensor.get(packet, subcarrier, antenna), den))
    }

    /// `xi = y_n / y_{n-q}`.
    pub fn ratio(&self, antenna: usize, shift: isize, packet: usize, subcarrier: usize) -> Result<C64> {
        if shift == 0 {
            self.pair(antenna, 0, packet, subcarrier)?;
            return Ok(C64::new(1.0, 0.0));
        }
        let (num, den) = self.pair(antenna, shift, packet, subcarrier)?;
        Ok(num / den)
    }

    /// D-CSIR `xi[m + p] - xi[m]`.
    pub fn dcsir(&self, antenna: usize, shift: isize, packet: usize, lag: usize, subcarrier: usize) -> Result<C64> {
        let later = self.ratio(antenna, shift, packet + lag, subcarrier)?;
        let earlier = self.ratio(antenna, shift, packet, subcarrier)?;
        Ok(later - earlier)
    }

    pub fn deriv_1(&self, antenna: usize, shift: isize, packet: usize, subcarrier: usize, phi: f64) -> Result<C64> {
        let (num, den) = self.pair(antenna, shift, packet, subcarrier)?;
        Ok(first_order_kernel(num, den, shift, phi))
    }

    pub fn deriv_2(
        &self,
        antenna: usize,
        shift: isize,
        packet: usize,
        subcarrier: usize,
        phi_a: f64,
        phi_b: f64,
    ) -> Result<C64> {
        let (num, den) = self.pair(antenna, shift, packet, subcarrier)?;
        Ok(second_order_kernel(num, den, shift, phi_a, phi_b))
    }

    pub fn deriv_k(&self, antenna: usize, shift: isize, packet: usize, subcarrier: usize, phis: &[f64]) -> Result<C64> {
        let (num, den) = self.pair(antenna, shift, packet, subcarrier)?;
        general_kernel(num, den, shift, phis)
    }
}

/// Which antenna pair and subcarrier an estimator reads its ratios from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SampleChoice {
    /// The denominator cell with the largest mean power over packets, paired
    /// with its neighbouring antenna.
    Strongest,
    Fixed {
        antenna: usize,
        shift: isize,
        subcarrier: usize,
    },
}

impl SampleChoice {
    /// `(antenna, shift, subcarrier)` for this tensor.
    pub fn resolve(&self, y: &CsiTensor) -> (usize, isize, usize) {
        match *self {
            SampleChoice::Fixed { antenna, shift, subcarrier } => (antenna, shift, subcarrier),
            SampleChoice::Strongest => {
                let (denominator, subcarrier) = strongest_cell(y);
                let (_, _, nc) = y.dims();
                if denominator + 1 < nc {
                    (denominator + 1, 1, subcarrier)
                } else {
                    (denominator - 1, -1, subcarrier)
                }
            }
        }
    }
}

/// Mean power over packets of every `(antenna, subcarrier)` cell, as an
/// `N x G` table. Clock offsets have unit modulus, so this is offset-free,
/// and with distinct Dopplers it equals `|S_n[g]|^2 + sum_l |alpha_l|^2`.
pub fn cell_power(y: &CsiTensor) -> Vec<Vec<f64>> {
    let (mc, gc, nc) = y.dims();
    let mut table = vec![vec![0.0; gc]; nc];
    for m in 0..mc {
        for g in 0..gc {
            for (n, row) in table.iter_mut().enumerate() {
                row[g] += y.get(m, g, n).norm_sqr();
            }
        }
    }
    for row in table.iter_mut() {
        for v in row.iter_mut() {
            *v /= mc as f64;
        }
    }
    table
}

/// `(antenna, subcarrier)` with the largest mean power: the cell where the
/// static component most dominates, so the ratio series converges best when
/// it is the denominator.
pub fn strongest_cell(y: &CsiTensor) -> (usize, usize) {
    let table = cell_power(y);
    let mut best = (0, 0, f64::NEG_INFINITY);
    for (n, row) in table.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            if v > best.2 {
                best = (n, g, v);
            }
        }
    }
    (best.0, best.1)
}

/// `y_n[m,g] / y_{n-q}[m,g]` with the default denominator floor.
pub fn csi_ratio(y: &CsiTensor, antenna: usize, shift: isize, packet: usize, subcarrier: usize) -> Result<C64> {
    RatioView::new(y).ratio(antenna, shift, packet, subcarrier)
}

/// `xi[m + p, g] - xi[m, g]` with the default denominator floor.
pub fn d_csir(y: &CsiTensor, antenna: usize, shift: isize, packet: usize, lag: usize, subcarrier: usize) -> Result<C64> {
    RatioView::new(y).dcsir(antenna, shift, packet, lag, subcarrier)
}

pub fn taylor_deriv_1(y: &CsiTensor, antenna: usize, shift: isize, packet: usize, subcarrier: usize, phi: f64) -> Result<C64> {
    RatioView::new(y).deriv_1(antenna, shift, packet, subcarrier, phi)
}

pub fn taylor_deriv_2(
    y: &CsiTensor,
    antenna: usize,
    shift: isize,
    packet: usize,
    subcarrier: usize,
    phi_a: f64,
    phi_b: f64,
) -> Result<C64> {
    RatioView::new(y).deriv_2(antenna, shift, packet, subcarrier, phi_a, phi_b)
}

pub fn taylor_deriv_k(y: &CsiTensor, antenna: usize, shift: isize, packet: usize, subcarrier: usize, phis: &[f64]) -> Result<C64> {
    RatioView::new(y).deriv_k(antenna, shift, packet, subcarrier, phis)
}

/// `h(phi) = (y_{n-q} - e^{-jq phi} y_n) / y_{n-q}^2`.
#[inline]
pub fn first_order_kernel(num: C64, den: C64, shift: isize, phi: f64) -> C64 {
    (den - cis(-(shift as f64) * phi) * num) / (den * den)
}

/// `H(phi_a, phi_b) = 2 a_a a_b y_n / y_{n-q}^3 - (a_a + a_b) / y_{n-q}^2`
/// with `a = e^{-jq phi}`.
#[inline]
pub fn second_order_kernel(num: C64, den: C64, shift: isize, phi_a: f64, phi_b: f64) -> C64 {
    let q = shift as f64;
    let a = cis(-q * phi_a);
    let b = cis(-q * phi_b);
    let den2 = den * den;
    2.0 * a * b * num / (den2 * den) - (a + b) / den2
}

/// Order-`k` mixed derivative kernel
/// `(-1)^k [k! A y_n - (k-1)! sum_i (A / a_i) y_{n-q}] / y_{n-q}^{k+1}`
/// with `a_i = e^{-jq phi_i}` and `A` their product.
pub fn general_kernel(num: C64, den: C64, shift: isize, phis: &[f64]) -> Result<C64> {
    let order = phis.len();
    if order == 0 {
        return Err(Error::InvalidConfig("derivative order must be at least 1".into()));
    }
    let q = shift as f64;
    let factors: Vec<C64> = phis.iter().map(|&phi| cis(-q * phi)).collect();
    let product: C64 = factors.iter().product();
    let leave_one_out: C64 = (0..order)
        .map(|i| {
            factors
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, a)| *a)
                .product::<C64>()
        })
        .sum();
    let fact_k: f64 = (1..=order).map(|i| i as f64).product();
    let fact_km1 = fact_k / order as f64;
    let sign = if order % 2 == 0 { 1.0 } else { -1.0 };
    let bracket = fact_k * product * num - fact_km1 * leave_one_out * den;
    Ok(sign * bracket / den.powu(order as u32 + 1))
}

/// Sufficient-condition margin for convergence of the Taylor series:
/// `|y_{n-q}| - 2 L max_l |alpha_l|`. Positive means the condition holds.
pub fn convergence_margin(
    y: &CsiTensor,
    paths: &PathSet,
    antenna: usize,
    shift: isize,
    packet: usize,
    subcarrier: usize,
) -> Result<f64> {
    let view = RatioView::with_floor(y, 0.0);
    let other = view.denominator_antenna(antenna, shift)?;
    view.check_packet(packet, subcarrier)?;
    let den = y.get(packet, subcarrier, other);
    Ok(den.norm() - 2.0 * paths.dynamic.len() as f64 * paths.max_dynamic_gain())
}

/// Accuracy summary of the truncated (order 1 plus same-path order 2) Taylor
/// reconstruction of the D-CSIR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorDiagnostics {
    /// Mean normalised squared remainder over convergent terms.
    pub error_proportion: f64,
    pub convergence_probability: f64,
    pub divergent_fraction: f64,
    /// Number of `(m, g, n)` terms examined.
    pub terms: usize,
}

/// Measures how well the truncated Taylor series reproduces the true D-CSIR
/// at lag `lag` for shift `q = 1`, over every packet, subcarrier and valid
/// antenna. Requires the ground-truth paths and offsets of a noiseless
/// channel.
///
/// The remainder of a term is the true D-CSIR minus the first-order terms
/// and the same-path second-order terms; cross-path second-order products
/// (harmonics) count as error. A term whose remainder, normalised by
/// `|xi[m + p]|`, reaches 1 is divergent: it is excluded from the error
/// average and counted in `divergent_fraction`.
pub fn error_proportion(
    config: &SystemConfig,
    paths: &PathSet,
    offsets: &OffsetTrace,
    lag: usize,
) -> Result<TaylorDiagnostics> {
    let y = crate::signal::synthesize_csi(&config.clone().with_snr(None), paths, offsets, None)?;
    let (mc, gc, nc) = y.dims();
    if lag == 0 || lag >= mc {
        return Err(Error::InvalidConfig(format!("lag {lag} must lie in 1..{mc}")));
    }
    if paths.dynamic.is_empty() {
        return Ok(TaylorDiagnostics {
            error_proportion: 0.0,
            convergence_probability: 1.0,
            divergent_fraction: 0.0,
            terms: (mc - lag) * gc * (nc - 1),
        });
    }
    let view = RatioView::new(&y);
    let shift = 1isize;
    let steps: Vec<C64> = paths
        .dynamic
        .iter()
        .map(|p| cis(std::f64::consts::TAU * lag as f64 * config.packet_interval * p.doppler_hz) - 1.0)
        .collect();

    // (sum of convergent normalised errors, convergent count, divergent count)
    let per_packet: Result<Vec<(f64, usize, usize)>> = (0..mc - lag)
        .into_par_iter()
        .map(|m| {
            let mut acc = (0.0, 0, 0);
            for g in 0..gc {
                let offset = offset_factor(config, offsets, m, g);
                for n in 1..nc {
                    let (num, den) = view.pair(n, shift, m, g)?;
                    let truth = view.dcsir(n, shift, m, lag, g)?;
                    let mut approx = C64::new(0.0, 0.0);
                    for (p, step) in paths.dynamic.iter().zip(&steps) {
                        let latent = path_term(config, p, m, g, n) * offset;
                        let delta = latent * step;
                        approx += first_order_kernel(num, den, shift, p.spatial_freq) * delta;
                        approx += 0.5
                            * second_order_kernel(num, den, shift, p.spatial_freq, p.spatial_freq)
                            * delta
                            * delta;
                    }
                    let later = view.ratio(n, shift, m + lag, g)?;
                    let normalised = (truth - approx).norm() / later.norm();
                    if normalised < 1.0 {
                        acc.0 += normalised * normalised;
                        acc.1 += 1;
                    } else {
                        acc.2 += 1;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let (sum, convergent, divergent) = per_packet?
        .into_iter()
        .fold((0.0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let terms = convergent + divergent;
    let divergent_fraction = divergent as f64 / terms as f64;
    Ok(TaylorDiagnostics {
        error_proportion: if convergent > 0 { sum / convergent as f64 } else { 0.0 },
        convergence_probability: 1.0 - divergent_fraction,
        divergent_fraction,
        terms,
    })
}
