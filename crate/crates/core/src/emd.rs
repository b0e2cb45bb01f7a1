//! Univariate empirical mode decomposition.
//!
//! Envelopes are natural cubic splines through the local maxima and minima,
//! with the two extrema nearest each end mirrored across that end. A sifting
//! candidate is accepted as an IMF once its extrema and zero-crossing counts
//! differ by at most one and the envelope mean is within 5% of its peak
//! magnitude, or after 50 sifts provided the count condition holds.
//! Extraction stops once the residual has fewer than `omega` extrema.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_OMEGA: usize = 20;
pub const MAX_SIFT_ITERATIONS: usize = 50;
/// Sifting continues past `MAX_SIFT_ITERATIONS` only while the count
/// condition fails, and gives up here.
pub const HARD_SIFT_CAP: usize = 200;
pub const ENVELOPE_TOLERANCE: f64 = 0.05;
pub const MIN_DECOMPOSE_LENGTH: usize = 10;
pub const MAX_IMFS: usize = 16;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtremaIndex {
    pub maxima: Vec<usize>,
    pub minima: Vec<usize>,
}

impl ExtremaIndex {
    pub fn count(&self) -> usize {
        self.maxima.len() + self.minima.len()
    }

    /// Maxima and minima merged in index order.
    pub fn pooled(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.maxima.iter().chain(&self.minima).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Local extrema. A plateau counts once, at its first index, and only if
/// the series moves the same way on both sides of it.
pub fn find_extrema(series: &[f64]) -> Result<ExtremaIndex> {
    let n = series.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let mut out = ExtremaIndex::default();
    let mut i = 1;
    while i < n - 1 {
        let prev = series[i - 1];
        let cur = series[i];
        if cur == prev {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && series[j + 1] == cur {
            j += 1;
        }
        if j + 1 < n {
            let next = series[j + 1];
            if prev < cur && next < cur {
                out.maxima.push(i);
            } else if prev > cur && next > cur {
                out.minima.push(i);
            }
        }
        i = j + 1;
    }
    Ok(out)
}

/// Sign changes between consecutive samples; an exact zero that follows a
/// nonzero sample counts once.
pub fn count_zero_crossings(series: &[f64]) -> usize {
    series
        .windows(2)
        .filter(|w| (w[0] < 0.0 && w[1] > 0.0) || (w[0] > 0.0 && w[1] < 0.0) || (w[1] == 0.0 && w[0] != 0.0))
        .count()
}

/// Natural cubic spline through `(xs, ys)`, evaluated at `0..n`.
pub(crate) fn natural_cubic_spline(xs: &[f64], ys: &[f64], n: usize) -> Vec<f64> {
    let k = xs.len();
    debug_assert!(k >= 2 && ys.len() == k);
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    // Second derivatives; natural ends pin them to zero.
    let mut m = vec![0.0; k];
    if k > 2 {
        let size = k - 2;
        let mut diag = vec![0.0; size];
        let mut upper = vec![0.0; size];
        let mut rhs = vec![0.0; size];
        for r in 0..size {
            let i = r + 1;
            diag[r] = 2.0 * (h[i - 1] + h[i]);
            upper[r] = h[i];
            rhs[r] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
        }
        // Thomas algorithm; the sub-diagonal equals h[r] for row r + 1.
        for r in 1..size {
            let w = h[r] / diag[r - 1];
            diag[r] -= w * upper[r - 1];
            rhs[r] -= w * rhs[r - 1];
        }
        m[size] = rhs[size - 1] / diag[size - 1];
        for r in (0..size - 1).rev() {
            m[r + 1] = (rhs[r] - upper[r] * m[r + 2]) / diag[r];
        }
    }

    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for t in 0..n {
        let x = t as f64;
        while seg + 2 < k && x > xs[seg + 1] {
            seg += 1;
        }
        let (x0, x1) = (xs[seg], xs[seg + 1]);
        let hh = x1 - x0;
        let a = (x1 - x) / hh;
        let b = (x - x0) / hh;
        let v = a * ys[seg]
            + b * ys[seg + 1]
            + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * hh * hh / 6.0;
        out.push(v);
    }
    out
}

fn envelope(series: &[f64], idx: &[usize]) -> Vec<f64> {
    let n = series.len();
    let last = (n - 1) as f64;
    let mut xs = Vec::with_capacity(idx.len() + 4);
    let mut ys = Vec::with_capacity(idx.len() + 4);
    for &i in idx.iter().take(2).rev() {
        xs.push(-(i as f64));
        ys.push(series[i]);
    }
    for &i in idx {
        xs.push(i as f64);
        ys.push(series[i]);
    }
    for &i in idx.iter().rev().take(2) {
        xs.push(2.0 * last - i as f64);
        ys.push(series[i]);
    }
    natural_cubic_spline(&xs, &ys, n)
}

/// Mean of the upper and lower spline envelopes.
pub fn envelope_mean(series: &[f64], extrema: &ExtremaIndex) -> Result<Vec<f64>> {
    if extrema.maxima.len() < 2 || extrema.minima.len() < 2 {
        return Err(Error::InsufficientExtrema(format!(
            "{} maxima and {} minima, need 2 of each",
            extrema.maxima.len(),
            extrema.minima.len()
        )));
    }
    let upper = envelope(series, &extrema.maxima);
    let lower = envelope(series, &extrema.minima);
    Ok(upper.iter().zip(&lower).map(|(u, l)| 0.5 * (u + l)).collect())
}

/// One sifting step: the series minus its envelope mean.
pub fn sift_once(series: &[f64]) -> Result<Vec<f64>> {
    let extrema = find_extrema(series)?;
    let mean = envelope_mean(series, &extrema)?;
    Ok(series.iter().zip(&mean).map(|(x, m)| x - m).collect())
}

fn max_abs(series: &[f64]) -> f64 {
    series.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn count_condition(series: &[f64], extrema: &ExtremaIndex) -> bool {
    extrema.count().abs_diff(count_zero_crossings(series)) <= 1
}

fn mean_condition(series: &[f64], mean: &[f64]) -> bool {
    max_abs(mean) <= ENVELOPE_TOLERANCE * max_abs(series)
}

pub fn is_imf(candidate: &[f64]) -> bool {
    let Ok(extrema) = find_extrema(candidate) else {
        return false;
    };
    let Ok(mean) = envelope_mean(candidate, &extrema) else {
        return false;
    };
    count_condition(candidate, &extrema) && mean_condition(candidate, &mean)
}

/// Sifts one IMF out of `series`, or `None` when the envelopes become
/// undefined or the count condition never holds.
fn extract_imf(series: &[f64]) -> Option<Vec<f64>> {
    let mut h = series.to_vec();
    for iter in 0..HARD_SIFT_CAP {
        let extrema = find_extrema(&h).ok()?;
        let mean = envelope_mean(&h, &extrema).ok()?;
        let counts_ok = count_condition(&h, &extrema);
        if counts_ok && (iter >= MAX_SIFT_ITERATIONS || mean_condition(&h, &mean)) {
            return Some(h);
        }
        for (x, m) in h.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImfSet {
    /// Highest frequency first.
    pub imfs: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
}

impl ImfSet {
    pub fn len(&self) -> usize {
        self.imfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imfs.is_empty()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = self.residual.clone();
        for imf in &self.imfs {
            for (o, v) in out.iter_mut().zip(imf) {
                *o += v;
            }
        }
        out
    }
}

pub fn decompose(series: &[f64], omega: usize) -> Result<ImfSet> {
    if series.len() < MIN_DECOMPOSE_LENGTH {
        return Err(Error::TooShort {
            needed: MIN_DECOMPOSE_LENGTH,
            got: series.len(),
        });
    }
    if omega < 4 {
        return Err(Error::InvalidParameter(format!("omega {omega} must be at least 4")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("series is not finite".into()));
    }
    let mut residual = series.to_vec();
    let mut imfs = Vec::new();
    while imfs.len() < MAX_IMFS {
        if find_extrema(&residual)?.count() < omega {
            break;
        }
        let Some(imf) = extract_imf(&residual) else {
            break;
        };
        for (r, v) in residual.iter_mut().zip(&imf) {
            *r -= v;
        }
        imfs.push(imf);
    }
    Ok(ImfSet { imfs, residual })
}
