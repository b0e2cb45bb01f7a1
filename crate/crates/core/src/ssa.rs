//! Singular spectrum analysis: Hankel embedding, SVD, grouping and
//! anti-diagonal averaging back to a series.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, JACOBI_MAX_SWEEPS, JACOBI_TOL};

pub const DEFAULT_ENERGY_KEEP: f64 = 0.9;
pub const MAX_DEFAULT_WINDOW: usize = 250;

/// `floor(n/4)` capped at 250, never below 2.
pub fn default_window(n: usize) -> usize {
    (n / 4).clamp(2, MAX_DEFAULT_WINDOW)
}

/// Hankel matrix of lagged windows, `window` rows by `n - window + 1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMatrix {
    pub window: usize,
    pub values: Matrix,
}

impl TrajectoryMatrix {
    pub fn k(&self) -> usize {
        self.values.cols()
    }
}

pub fn build_trajectory(series: &[f64], window: usize) -> Result<TrajectoryMatrix> {
    let n = series.len();
    if window < 2 || window > n / 2 {
        return Err(Error::WindowOutOfRange { window, len: n });
    }
    let k = n - window + 1;
    let mut values = Matrix::zeros(window, k);
    for i in 0..window {
        for j in 0..k {
            values[(i, j)] = series[i + j];
        }
    }
    Ok(TrajectoryMatrix { window, values })
}

/// Thin SVD truncated to numerical rank.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Descending, all above `1e-12 * singular_values[0]`.
    pub singular_values: Vec<f64>,
    /// `rows x r`, orthonormal columns.
    pub left: Matrix,
    /// `cols x r`, orthonormal columns.
    pub right: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `sum_{j in idx} s_j u_j v_jᵀ`.
    pub fn partial_sum(&self, idx: impl IntoIterator<Item = usize>) -> Matrix {
        let (m, n) = (self.left.rows(), self.right.rows());
        let mut out = Matrix::zeros(m, n);
        for j in idx {
            let s = self.singular_values[j];
            for a in 0..m {
                let u = s * self.left[(a, j)];
                if u == 0.0 {
                    continue;
                }
                for b in 0..n {
                    out[(a, b)] += u * self.right[(b, j)];
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.partial_sum(0..self.rank())
    }
}

const RANK_TOL: f64 = 1e-12;

/// SVD by one-sided cyclic Jacobi rotations.
///
/// Rotations are applied to the columns of whichever orientation has the
/// fewer columns, which diagonalizes the smaller Gram matrix without ever
/// forming it. Each left singular vector's largest-magnitude entry is made
/// nonnegative.
pub fn svd(x: &Matrix) -> Result<SvdResult> {
    if !x.is_finite() {
        return Err(Error::InvalidParameter("svd input is not finite".into()));
    }
    let transposed = x.cols() > x.rows();
    // Work on `a` (m x n, n <= m) stored column-major for cheap column access.
    let a_mat = if transposed { x.transpose() } else { x.clone() };
    let (m, n) = a_mat.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a_mat.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    let mut sweep = 0;
    loop {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (a, b) = (*xp, *xq);
                    *xp = c * a - s * b;
                    *xq = s * a + c * b;
                }
                let (lo, hi) = v.split_at_mut(q);
                for (vp, vq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (a, b) = (*vp, *vq);
                    *vp = c * a - s * b;
                    *vq = s * a + c * b;
                }
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        sweep += 1;
        if !rotated {
            break;
        }
        if sweep >= JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence(sweep));
        }
    }

    let sigma: Vec<f64> = norms.iter().map(|s| s.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let top = order.first().map_or(0.0, |&i| sigma[i]);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| top > 0.0 && sigma[i] > RANK_TOL * top)
        .collect();

    let r = keep.len();
    // Columns of `a` normalize to the singular vectors on the long side.
    let mut long = Matrix::zeros(m, r);
    let mut short = Matrix::zeros(n, r);
    let mut values = Vec::with_capacity(r);
    for (k, &i) in keep.iter().enumerate() {
        values.push(sigma[i]);
        for a in 0..m {
            long[(a, k)] = cols[i][a] / sigma[i];
        }
        for b in 0..n {
            short[(b, k)] = v[i][b];
        }
    }
    let (mut left, mut right) = if transposed { (short, long) } else { (long, short) };
    for k in 0..r {
        let mut big = 0.0f64;
        for a in 0..left.rows() {
            if left[(a, k)].abs() > big.abs() {
                big = left[(a, k)];
            }
        }
        if big < 0.0 {
            for a in 0..left.rows() {
                left[(a, k)] = -left[(a, k)];
            }
            for b in 0..right.rows() {
                right[(b, k)] = -right[(b, k)];
            }
        }
    }
    Ok(SvdResult {
        singular_values: values,
        left,
        right,
    })
}

/// Disjoint sets of zero-based component indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: Vec<Vec<usize>>,
}

impl Grouping {
    pub fn singletons(rank: usize) -> Self {
        Grouping {
            groups: (0..rank).map(|i| vec![i]).collect(),
        }
    }

    pub fn validate(&self, rank: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.groups.iter().flatten() {
            if i >= rank {
                return Err(Error::IndexOutOfRank { index: i, rank });
            }
            if !seen.insert(i) {
                return Err(Error::InvalidParameter(format!(
                    "component {i} appears in more than one group"
                )));
            }
        }
        Ok(())
    }
}

pub fn group_components(svd: &SvdResult, grouping: &Grouping) -> Result<Vec<Matrix>> {
    grouping.validate(svd.rank())?;
    Ok(grouping
        .groups
        .iter()
        .map(|g| svd.partial_sum(g.iter().copied()))
        .collect())
}

/// Averages each anti-diagonal `i + j = k` into element `k` of the output.
pub fn diagonal_average(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let len = rows + cols - 1;
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for i in 0..rows {
        for (j, &v) in m.row(i).iter().enumerate() {
            sums[i + j] += v;
            counts[i + j] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()
}

/// Number of leading components holding at least `energy_keep` of the
/// total squared singular values.
pub fn components_for_energy(singular_values: &[f64], energy_keep: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let target = energy_keep * total;
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            return i + 1;
        }
    }
    singular_values.len()
}

/// Reconstructs `series` from its leading SSA components.
///
/// The series is centered before embedding and the mean added back
/// afterwards, so the energy criterion ranks oscillations and trend
/// rather than the price level.
pub fn denoise(series: &[f64], window: usize, energy_keep: f64) -> Result<Vec<f64>> {
    if !(energy_keep > 0.0 && energy_keep <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "energy_keep {energy_keep} outside (0, 1]"
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("series is not finite".into()));
    }
    let mean = series.iter().sum::<f64>() / series.len().max(1) as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let traj = build_trajectory(&centered, window)?;
    let dec = svd(&traj.values)?;
    let keep = components_for_energy(&dec.singular_values, energy_keep);
    let recon = diagonal_average(&dec.partial_sum(0..keep));
    Ok(recon.into_iter().map(|x| x + mean).collect())
}
