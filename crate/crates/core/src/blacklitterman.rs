//! Equilibrium returns, absolute views built from forecasts, the Bayesian
//! posterior and the resulting portfolio weights. Everything is in daily
//! units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Matrix};

pub const DEFAULT_LAMBDA: f64 = 2.5;
pub const DEFAULT_TAU: f64 = 0.002;
pub const DEFAULT_LOOKBACK: usize = 500;
const CHECK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketInputs {
    pub tickers: Vec<String>,
    /// Covariance of daily excess returns.
    pub sigma: Matrix,
    /// Capitalization weights.
    pub w_mkt: Vec<f64>,
    pub lambda: f64,
    pub tau: f64,
    pub rf: f64,
}

impl MarketInputs {
    pub fn n(&self) -> usize {
        self.tickers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.sigma.shape() != (n, n) || self.w_mkt.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} tickers, covariance {:?}, {} weights",
                self.sigma.shape(),
                self.w_mkt.len()
            )));
        }
        if !self.sigma.is_symmetric(CHECK_TOL) {
            return Err(Error::InvalidParameter("covariance is not symmetric".into()));
        }
        if !crate::linalg::is_positive_semidefinite(&self.sigma, CHECK_TOL)? {
            return Err(Error::InvalidParameter("covariance is not positive semi-definite".into()));
        }
        if self.w_mkt.iter().any(|w| !(*w >= 0.0)) || (self.w_mkt.iter().sum::<f64>() - 1.0).abs() > CHECK_TOL {
            return Err(Error::InvalidParameter("market weights must be non-negative and sum to 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidParameter("bl.lambda must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter("bl.tau must be positive".into()));
        }
        Ok(())
    }
}

/// `lambda * sigma * w_mkt`. Only shapes are checked here; see
/// [`MarketInputs::validate`] for the full invariants.
pub fn implied_returns(inputs: &MarketInputs) -> Result<Vec<f64>> {
    let n = inputs.n();
    if inputs.sigma.shape() != (n, n) || inputs.w_mkt.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "covariance {:?} and {} weights for {n} tickers",
            inputs.sigma.shape(),
            inputs.w_mkt.len()
        )));
    }
    Ok(inputs
        .sigma
        .matvec(&inputs.w_mkt)?
        .into_iter()
        .map(|v| inputs.lambda * v)
        .collect())
}

/// Absolute views: row `j` of `p` selects one asset, `omega` holds the
/// diagonal of the view uncertainty matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    pub p: Matrix,
    pub q: Vec<f64>,
    pub omega: Vec<f64>,
}

impl ViewSet {
    pub fn empty(n: usize) -> Self {
        ViewSet {
            p: Matrix::zeros(0, n),
            q: Vec::new(),
            omega: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Column selected by each row.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.p.rows())
            .map(|j| self.p.row(j).iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect()
    }
}

/// One view per forecast, in input order; duplicates are kept as separate
/// rows. Uncertainty is `tau * sigma[i][i]` for the selected asset `i`.
pub fn build_views(forecasts: &[(String, f64)], universe: &[String], sigma: &Matrix, tau: f64) -> Result<ViewSet> {
    let n = universe.len();
    if sigma.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "covariance {:?} for {n} tickers",
            sigma.shape()
        )));
    }
    let mut views = ViewSet::empty(n);
    let mut rows = Vec::with_capacity(forecasts.len());
    for (ticker, ret) in forecasts {
        let i = universe
            .iter()
            .position(|t| t == ticker)
            .ok_or_else(|| Error::UnknownTicker(ticker.clone()))?;
        let mut row = vec![0.0; n];
        row[i] = 1.0;
        rows.push(row);
        views.q.push(*ret);
        views.omega.push(tau * sigma[(i, i)]);
    }
    if !rows.is_empty() {
        views.p = Matrix::from_rows(&rows)?;
    }
    Ok(views)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimate {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
}

/// Posterior mean and covariance, computed in the equivalent form that
/// only factors the `k x k` matrix `P tau S P' + Omega`.
pub fn posterior(pi: &[f64], sigma: &Matrix, views: &ViewSet, tau: f64) -> Result<PosteriorEstimate> {
    let n = pi.len();
    if sigma.shape() != (n, n) || views.p.cols() != n || views.p.rows() != views.len() || views.omega.len() != views.len() {
        return Err(Error::DimensionMismatch("posterior inputs".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter("bl.tau must be positive".into()));
    }
    let ts = sigma.scale(tau);
    // tau * sigma must be invertible.
    Cholesky::new(&ts)?;
    if views.omega.iter().any(|o| !(*o > 0.0)) {
        return Err(Error::SingularMatrix);
    }
    if views.is_empty() {
        return Ok(PosteriorEstimate {
            mu: pi.to_vec(),
            sigma: sigma.add(&ts)?,
        });
    }
    let p = &views.p;
    let ts_pt = ts.matmul(&p.transpose())?; // n x k
    let mut a = p.matmul(&ts_pt)?; // k x k
    for (j, o) in views.omega.iter().enumerate() {
        a[(j, j)] += o;
    }
    a.symmetrize();
    let chol = Cholesky::new(&a)?;
    let gap: Vec<f64> = views
        .q
        .iter()
        .zip(p.matvec(pi)?)
        .map(|(q, pp)| q - pp)
        .collect();
    let x = chol.solve_vec(&gap)?;
    let shift = ts_pt.matvec(&x)?;
    let mu = pi.iter().zip(&shift).map(|(a, b)| a + b).collect();

    let correction = ts_pt.matmul(&chol.solve_mat(&ts_pt.transpose())?)?;
    let mut post = sigma.add(&ts.sub(&correction)?)?;
    post.symmetrize();
    Ok(PosteriorEstimate { mu, sigma: post })
}

/// Solves `(lambda * sigma_post) w = mu` without normalizing.
pub fn raw_weights(post: &PosteriorEstimate, lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter("bl.lambda must be positive".into()));
    }
    Cholesky::new(&post.sigma.scale(lambda))?.solve_vec(&post.mu)
}

/// Divides by the sum; a sum below `1e-8` in magnitude is rejected.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = raw.iter().sum();
    if !(s.abs() >= 1e-8) {
        return Err(Error::DegenerateWeights(s));
    }
    Ok(raw.iter().map(|w| w / s).collect())
}

pub fn optimal_weights(post: &PosteriorEstimate, lambda: f64) -> Result<Vec<f64>> {
    normalize_weights(&raw_weights(post, lambda)?)
}

/// Unbiased covariance of the columns of a `T x N` return matrix.
pub fn sample_covariance(returns: &Matrix) -> Result<Matrix> {
    let (t, n) = returns.shape();
    if t < n + 1 || t < 2 {
        return Err(Error::TooFewObservations {
            needed: (n + 1).max(2),
            got: t,
        });
    }
    let means: Vec<f64> = (0..n)
        .map(|j| returns.column(j).iter().sum::<f64>() / t as f64)
        .collect();
    let mut cov = Matrix::zeros(n, n);
    for r in 0..t {
        let row = returns.row(r);
        for i in 0..n {
            let di = row[i] - means[i];
            for j in i..n {
                cov[(i, j)] += di * (row[j] - means[j]);
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] / (t - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if (0..n).any(|i| cov[(i, i)] < 1e-20) {
        log::warn!("covariance is degenerate: a return series is constant");
    }
    Ok(cov)
}

/// Subtracts a constant daily risk-free rate from every entry.
pub fn excess_returns(returns: &Matrix, rf: f64) -> Matrix {
    let (r, c) = returns.shape();
    let data = returns.as_slice().iter().map(|x| x - rf).collect();
    Matrix::from_vec(r, c, data).expect("same shape")
}

/// Mean-variance utility `mu'w - lambda/2 w' sigma w`.
pub fn utility(mu: &[f64], sigma: &Matrix, w: &[f64], lambda: f64) -> Result<f64> {
    Ok(dot(mu, w) - 0.5 * lambda * dot(w, &sigma.matvec(w)?))
}
