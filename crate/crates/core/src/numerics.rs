//! Shared numerical kernels: SVD-based null spaces, minimum-norm least
//! squares, spectral peak picking, assignment, and seeded randomness.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Default relative singular-value threshold shared by the estimators.
pub const DEFAULT_REL_TOL: f64 = 1e-3;

pub const J: C64 = C64::new(0.0, 1.0);

/// `exp(j * phase)`.
#[inline]
pub fn cis(phase: f64) -> C64 {
    C64::from_polar(1.0, phase)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_pi(angle: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = angle.rem_euclid(two_pi);
    if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Left singular vectors (all `rows` of them) with singular values sorted in
/// descending order.
///
/// The full left basis comes from the Hermitian eigendecomposition of
/// `M M^H`; the singular values come from a thin SVD of `M` itself, which
/// keeps their accuracy. A thin SVD cannot be used for the basis because it
/// returns only `min(rows, cols)` vectors, and zero-padding to square is not
/// reliable with nalgebra's complex bidiagonalisation.
pub fn left_svd(m: &CMatrix) -> (CMatrix, Vec<f64>) {
    let rows = m.nrows();
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let gram = m * m.adjoint();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut sorted_u = CMatrix::zeros(rows, rows);
    for (dst, &src) in order.iter().enumerate() {
        sorted_u.set_column(dst, &eig.eigenvectors.column(src));
    }
    (sorted_u, sv)
}

/// Number of singular values at or above `rel_tol * sigma_max`.
pub fn numerical_rank(singular_values: &[f64], rel_tol: f64) -> usize {
    let max = singular_values.iter().copied().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    singular_values
        .iter()
        .filter(|&&s| s >= rel_tol * max)
        .count()
}

#[derive(Debug, Clone)]
pub struct NullSpaceResult {
    /// Orthonormal columns spanning the left null space.
    pub basis: CMatrix,
    pub numerical_rank: usize,
    /// Descending, `min(rows, cols)` entries.
    pub singular_values: Vec<f64>,
}

/// Left null space: left singular vectors whose singular values fall below
/// `rel_tol * sigma_max`. A zero matrix yields the identity.
pub fn null_space(m: &CMatrix, rel_tol: f64) -> NullSpaceResult {
    null_space_capped(m, rel_tol, usize::MAX)
}

/// Like [`null_space`] but treats at most `max_signal_dim` leading singular
/// vectors as signal, which is how the subspace estimators impose a known
/// model order on an otherwise full-rank measurement.
pub fn null_space_capped(m: &CMatrix, rel_tol: f64, max_signal_dim: usize) -> NullSpaceResult {
    let rows = m.nrows();
    let (u, sv) = left_svd(m);
    let rank = numerical_rank(&sv, rel_tol);
    let signal = rank.min(max_signal_dim);
    let basis = u.columns(signal, rows - signal).into_owned();
    NullSpaceResult {
        basis,
        numerical_rank: rank,
        singular_values: sv,
    }
}

/// Ratio of the largest to the smallest singular value (infinite when singular).
pub fn condition_number(a: &CMatrix) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Debug, Clone)]
pub struct LsSolution {
    pub x: CVector,
    /// `||A x - b||_2`.
    pub residual: f64,
    pub rank: usize,
    pub rank_deficient: bool,
    pub condition: f64,
}

/// Minimum-norm least-squares solve through the SVD pseudo-inverse. Singular
/// values below `rel_tol * sigma_max` are discarded and flagged.
pub fn pinv_solve(a: &CMatrix, b: &CVector, rel_tol: f64) -> Result<LsSolution> {
    if a.nrows() != b.len() {
        return Err(Error::InvalidConfig(format!(
            "system has {} rows but right-hand side has {} entries",
            a.nrows(),
            b.len()
        )));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v requested");
    let sv = &svd.singular_values;
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let mut x = CVector::zeros(a.ncols());
    let mut rank = 0;
    for i in 0..sv.len() {
        if max > 0.0 && sv[i] >= rel_tol * max {
            rank += 1;
            let coeff = u.column(i).dotc(b) / sv[i];
            x += v_t.row(i).adjoint() * coeff;
        }
    }
    let residual = (a * &x - b).norm();
    Ok(LsSolution {
        x,
        residual,
        rank,
        rank_deficient: rank < a.ncols().min(a.nrows()) || rank < a.ncols(),
        condition: if min == 0.0 { f64::INFINITY } else { max / min },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub location: f64,
    pub height: f64,
    /// Grid index of the sample the peak was found at.
    pub index: usize,
}

/// Apex of the parabola through three points, falling back to the middle
/// sample when the points are collinear.
fn parabolic_apex(x: [f64; 3], y: [f64; 3]) -> (f64, f64) {
    let d01 = x[0] - x[1];
    let d02 = x[0] - x[2];
    let d12 = x[1] - x[2];
    let denom = d01 * d02 * d12;
    let a = (x[2] * (y[1] - y[0]) + x[1] * (y[0] - y[2]) + x[0] * (y[2] - y[1])) / denom;
    let b = (x[2] * x[2] * (y[0] - y[1]) + x[1] * x[1] * (y[2] - y[0]) + x[0] * x[0] * (y[1] - y[2]))
        / denom;
    if !(a < 0.0) || !a.is_finite() || !b.is_finite() {
        return (x[1], y[1]);
    }
    let c = y[1] - a * x[1] * x[1] - b * x[1];
    let xv = (-b / (2.0 * a)).clamp(x[0].min(x[2]), x[0].max(x[2]));
    let yv = a * xv * xv + b * xv + c;
    (xv, yv.max(y[1]))
}

fn rank_peaks(mut peaks: Vec<Peak>, count: usize) -> Result<Vec<Peak>> {
    if peaks.len() < count {
        return Err(Error::InsufficientPeaks {
            found: peaks.len(),
            wanted: count,
        });
    }
    peaks.sort_by(|a, b| b.height.total_cmp(&a.height).then(a.index.cmp(&b.index)));
    peaks.truncate(count);
    Ok(peaks)
}

/// The `count` highest strict interior local maxima, apex-refined by a
/// three-point quadratic fit and sorted by height.
pub fn find_peaks(values: &[f64], grid: &[f64], count: usize) -> Result<Vec<Peak>> {
    rank_peaks(interior_peaks(values, grid)?, count)
}

fn interior_peaks(values: &[f64], grid: &[f64]) -> Result<Vec<Peak>> {
    if values.len() != grid.len() || values.len() < 3 {
        return Err(Error::InvalidConfig(
            "peak search needs equal-length value/grid arrays of at least 3 samples".into(),
        ));
    }
    let mut peaks = Vec::new();
    for i in 1..values.len() - 1 {
        if values[i] > values[i - 1] && values[i] > values[i + 1] {
            let (location, height) = parabolic_apex(
                [grid[i - 1], grid[i], grid[i + 1]],
                [values[i - 1], values[i], values[i + 1]],
            );
            peaks.push(Peak {
                location,
                height,
                index: i,
            });
        }
    }
    Ok(peaks)
}

/// Like [`find_peaks`], but an end sample above its only neighbour also
/// counts, located at the grid end. For bounded searches whose true
/// parameter may sit on the boundary of the grid.
pub fn find_peaks_with_edges(values: &[f64], grid: &[f64], count: usize) -> Result<Vec<Peak>> {
    let mut peaks = interior_peaks(values, grid)?;
    let last = values.len() - 1;
    for (i, neighbour) in [(0, 1), (last, last - 1)] {
        if values[i] > values[neighbour] {
            peaks.push(Peak { location: grid[i], height: values[i], index: i });
        }
    }
    rank_peaks(peaks, count)
}

/// Peak search on a periodic grid (e.g. spatial frequency over one turn):
/// the end samples are neighbours of each other and locations are wrapped
/// back into `[grid[0], grid[0] + period)`.
pub fn find_peaks_circular(
    values: &[f64],
    grid: &[f64],
    count: usize,
    period: f64,
) -> Result<Vec<Peak>> {
    let n = values.len();
    if n != grid.len() || n < 3 {
        return Err(Error::InvalidConfig(
            "peak search needs equal-length value/grid arrays of at least 3 samples".into(),
        ));
    }
    let mut peaks = Vec::new();
    for i in 0..n {
        let (l, r) = ((i + n - 1) % n, (i + 1) % n);
        if values[i] > values[l] && values[i] > values[r] {
            let xl = if i == 0 { grid[l] - period } else { grid[l] };
            let xr = if i == n - 1 { grid[r] + period } else { grid[r] };
            let (loc, height) =
                parabolic_apex([xl, grid[i], xr], [values[l], values[i], values[r]]);
            let location = grid[0] + (loc - grid[0]).rem_euclid(period);
            peaks.push(Peak {
                location,
                height,
                index: i,
            });
        }
    }
    rank_peaks(peaks, count)
}

/// Maximum-weight perfect assignment on a square score matrix (Hungarian
/// algorithm on negated scores). Returns `assignment[row] = column`.
pub fn max_weight_assignment(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    let max = scores
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    // 1-based potentials formulation, minimizing cost = max - score.
    let cost = |i: usize, j: usize| max - scores[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Seeded generator used everywhere randomness is needed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent per-trial seed from a master seed (SplitMix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Circular complex Gaussian sample with `E|w|^2 = variance`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}
