//! Portfolio evaluation: the rolling buy-and-hold scheme, periodic
//! rebalancing with proportional costs, the benchmark strategies and the
//! summary statistics.

use std::ops::Range;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::blacklitterman::{self as bl, MarketInputs};
use crate::error::{Error, Result};
use crate::ingest::{MarketCaps, OhlcvFrame};
use crate::linalg::Matrix;

pub const TRADING_DAYS: f64 = 252.0;
pub const DEFAULT_COST_RATE: f64 = 0.002;
pub const DEFAULT_HOLDING_PERIODS: [usize; 5] = [1, 3, 5, 10, 20];
/// Weights at or below this magnitude do not count as a holding.
pub const HOLDING_THRESHOLD: f64 = 1e-6;

/// Aligned close prices, `dates x tickers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePanel {
    pub tickers: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub prices: Matrix,
}

impl PricePanel {
    pub fn new(tickers: Vec<String>, dates: Vec<NaiveDate>, prices: Matrix) -> Result<Self> {
        if prices.shape() != (dates.len(), tickers.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{:?} prices for {} dates and {} tickers",
                prices.shape(),
                dates.len(),
                tickers.len()
            )));
        }
        if tickers.is_empty() {
            return Err(Error::EmptyUniverse);
        }
        if let Some(i) = prices.as_slice().iter().position(|p| !(*p > 0.0)) {
            return Err(Error::NonPositivePrice(i / tickers.len()));
        }
        Ok(PricePanel { tickers, dates, prices })
    }

    /// Closes of frames that share one calendar.
    pub fn from_frames(frames: &[OhlcvFrame]) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptyUniverse)?;
        if let Some(f) = frames.iter().find(|f| f.dates != first.dates) {
            return Err(Error::DimensionMismatch(format!(
                "{} does not share {}'s dates",
                f.ticker, first.ticker
            )));
        }
        let cols: Vec<Vec<f64>> = frames.iter().map(|f| f.close().to_vec()).collect();
        PricePanel::new(
            frames.iter().map(|f| f.ticker.clone()).collect(),
            first.dates.clone(),
            Matrix::from_columns(&cols)?,
        )
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    /// Simple return of every asset from `t - 1` to `t`.
    pub fn day_returns(&self, t: usize) -> Vec<f64> {
        let (now, before) = (self.prices.row(t), self.prices.row(t - 1));
        now.iter().zip(before).map(|(a, b)| a / b - 1.0).collect()
    }

    /// Returns for days `range` (each `t >= 1`), `range.len() x N`.
    pub fn returns(&self, range: Range<usize>) -> Matrix {
        let n = self.n_assets();
        let mut data = Vec::with_capacity(range.len() * n);
        for t in range.clone() {
            data.extend(self.day_returns(t));
        }
        Matrix::from_vec(range.len(), n, data).expect("consistent shape")
    }

    fn check_window(&self, test: &Range<usize>, holding: usize) -> Result<()> {
        if test.start == 0 || test.end > self.len() || test.len() < holding || holding == 0 {
            return Err(Error::InsufficientTestWindow {
                days: test.len(),
                holding,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    pub date: NaiveDate,
    pub weights: Vec<f64>,
}

/// Produces target weights for a position opened at the close before
/// day `t`, using only information available then.
pub trait WeightSource {
    fn weights(&mut self, t: usize) -> Result<Vec<f64>>;
}

impl<F: FnMut(usize) -> Result<Vec<f64>>> WeightSource for F {
    fn weights(&mut self, t: usize) -> Result<Vec<f64>> {
        self(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy: String,
    /// Days per run (rolling scheme) or between rebalances; `None` never
    /// rebalances.
    pub holding_period: Option<usize>,
    pub run_dates: Vec<NaiveDate>,
    pub run_returns: Vec<f64>,
    pub annual_return: f64,
    pub annual_volatility: f64,
    pub sharpe: f64,
    /// Set when the returns have no dispersion and the Sharpe ratio is
    /// reported as 0.
    pub zero_volatility: bool,
    pub mean_hhi: f64,
    pub std_hhi: f64,
    pub mean_stock_count: f64,
    pub cumulative_return: f64,
    pub cost_paid: f64,
    #[serde(skip)]
    pub weights: Vec<PortfolioWeights>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Sum of squared weights, accumulated with error-free transforms so the
/// result is the correctly rounded value in all but pathological cases.
pub fn hhi(weights: &[f64]) -> f64 {
    let (mut sum, mut err) = (0.0f64, 0.0f64);
    for &w in weights {
        let p = w * w;
        let p_err = w.mul_add(w, -p);
        let t = sum + p;
        let z = t - sum;
        err += (sum - (t - z)) + (p - z) + p_err;
        sum = t;
    }
    sum + err
}

pub fn stock_count(weights: &[f64]) -> usize {
    weights.iter().filter(|w| w.abs() > HOLDING_THRESHOLD).count()
}

/// Annualized mean excess return over annualized volatility.
pub fn sharpe(period_returns: &[f64], rf: f64, periods_per_year: f64) -> Result<f64> {
    if period_returns.len() < 2 {
        return Err(Error::TooFewObservations {
            needed: 2,
            got: period_returns.len(),
        });
    }
    let excess: Vec<f64> = period_returns.iter().map(|r| r - rf).collect();
    let m = mean(&excess);
    let sd = std_dev(&excess);
    // Rounding noise in an otherwise constant series is not dispersion.
    if !(sd > 0.0 && sd > 1e-14 * m.abs()) {
        return Err(Error::ZeroVolatility);
    }
    Ok(m * periods_per_year / (sd * periods_per_year.sqrt()))
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    strategy: &str,
    holding_period: Option<usize>,
    periods_per_year: f64,
    rf_per_period: f64,
    run_dates: Vec<NaiveDate>,
    run_returns: Vec<f64>,
    weights: Vec<PortfolioWeights>,
    cost_paid: f64,
) -> BacktestReport {
    let m = mean(&run_returns);
    let (sharpe_ratio, zero_volatility) = match sharpe(&run_returns, rf_per_period, periods_per_year) {
        Ok(s) => (s, false),
        Err(_) => (0.0, true),
    };
    let hhis: Vec<f64> = weights.iter().map(|w| hhi(&w.weights)).collect();
    let counts: Vec<f64> = weights.iter().map(|w| stock_count(&w.weights) as f64).collect();
    BacktestReport {
        strategy: strategy.into(),
        holding_period,
        annual_return: (1.0 + m).powf(periods_per_year) - 1.0,
        annual_volatility: std_dev(&run_returns) * periods_per_year.sqrt(),
        sharpe: sharpe_ratio,
        zero_volatility,
        mean_hhi: mean(&hhis),
        std_hhi: std_dev(&hhis),
        mean_stock_count: mean(&counts),
        cumulative_return: run_returns.iter().map(|r| 1.0 + r).product::<f64>() - 1.0,
        cost_paid,
        run_dates,
        run_returns,
        weights,
    }
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::DimensionMismatch(format!("{} weights for {n} assets", w.len())));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("weights are not finite".into()));
    }
    Ok(())
}

/// One buy-and-hold run per start day in `test` (day indices of the
/// panel, each needing the previous close). A run opened before day `t`
/// is held for `holding` days.
pub fn rolling_scheme(
    panel: &PricePanel,
    test: Range<usize>,
    source: &mut dyn WeightSource,
    holding: usize,
    strategy: &str,
    rf_daily: f64,
) -> Result<BacktestReport> {
    panel.check_window(&test, holding)?;
    let n = panel.n_assets();
    let runs = test.len() - holding + 1;
    let mut returns = Vec::with_capacity(runs);
    let mut dates = Vec::with_capacity(runs);
    let mut weights = Vec::with_capacity(runs);
    for t in test.start..test.start + runs {
        let w = source.weights(t)?;
        check_weights(&w, n)?;
        let (buy, sell) = (panel.prices.row(t - 1), panel.prices.row(t + holding - 1));
        let r: f64 = (0..n).map(|i| w[i] * (sell[i] / buy[i] - 1.0)).sum();
        returns.push(r);
        dates.push(panel.dates[t]);
        weights.push(PortfolioWeights {
            date: panel.dates[t],
            weights: w,
        });
    }
    Ok(summarize(
        strategy,
        Some(holding),
        TRADING_DAYS / holding as f64,
        rf_daily * holding as f64,
        dates,
        returns,
        weights,
        0.0,
    ))
}

/// Daily wealth path: start at the first target, let weights drift, and
/// trade back to a fresh target every `period` days paying
/// `cost_rate * turnover` of wealth. `period = None` never rebalances.
pub fn rebalance_run(
    panel: &PricePanel,
    test: Range<usize>,
    source: &mut dyn WeightSource,
    period: Option<usize>,
    cost_rate: f64,
    strategy: &str,
    rf_daily: f64,
) -> Result<BacktestReport> {
    if !(cost_rate >= 0.0) {
        return Err(Error::InvalidParameter("backtest.cost_rate must be non-negative".into()));
    }
    if period == Some(0) {
        return Err(Error::InvalidParameter("rebalance period must be positive".into()));
    }
    panel.check_window(&test, 1)?;
    let n = panel.n_assets();
    let mut wealth = 1.0;
    let mut cost_paid = 0.0;
    let mut held = source.weights(test.start)?;
    check_weights(&held, n)?;
    let mut targets = vec![PortfolioWeights {
        date: panel.dates[test.start],
        weights: held.clone(),
    }];
    let mut returns = Vec::with_capacity(test.len());
    let mut dates = Vec::with_capacity(test.len());
    for t in test.clone() {
        let before = wealth;
        let k = t - test.start;
        if k > 0 && period.is_some_and(|p| k.is_multiple_of(p)) {
            let target = source.weights(t)?;
            check_weights(&target, n)?;
            let turnover: f64 = target.iter().zip(&held).map(|(a, b)| (a - b).abs()).sum();
            let cost = cost_rate * turnover * wealth;
            wealth -= cost;
            cost_paid += cost;
            held = target.clone();
            targets.push(PortfolioWeights {
                date: panel.dates[t],
                weights: target,
            });
        }
        let day = panel.day_returns(t);
        let gross: f64 = held.iter().zip(&day).map(|(w, r)| w * r).sum();
        wealth *= 1.0 + gross;
        if (1.0 + gross).abs() > 0.0 {
            for (w, r) in held.iter_mut().zip(&day) {
                *w *= (1.0 + r) / (1.0 + gross);
            }
        }
        returns.push(wealth / before - 1.0);
        dates.push(panel.dates[t]);
    }
    Ok(summarize(strategy, period, TRADING_DAYS, rf_daily, dates, returns, targets, cost_paid))
}

pub fn strategy_equal_weight(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::EmptyUniverse);
    }
    Ok(vec![1.0 / n as f64; n])
}

/// Capitalization weights in `universe` order.
pub fn strategy_market_weight(caps: &[(String, f64)], universe: &[String]) -> Result<Vec<f64>> {
    if universe.is_empty() {
        return Err(Error::EmptyUniverse);
    }
    let values = universe
        .iter()
        .map(|t| {
            let cap = caps
                .iter()
                .find(|(name, _)| name == t)
                .map(|(_, c)| *c)
                .ok_or_else(|| Error::MissingCap(t.clone()))?;
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::InvalidParameter(format!("market cap of {t} must be positive")));
            }
            Ok(cap)
        })
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = values.iter().sum();
    Ok(values.into_iter().map(|c| c / total).collect())
}

/// Caps of every universe ticker as of `date`.
pub fn caps_on(caps: &MarketCaps, universe: &[String], date: NaiveDate) -> Result<Vec<(String, f64)>> {
    universe
        .iter()
        .map(|t| {
            caps.cap_on(t, date)
                .map(|c| (t.clone(), c))
                .ok_or_else(|| Error::MissingCap(t.clone()))
        })
        .collect()
}

/// Euclidean projection onto `{w >= 0, sum w = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

pub const MV_MAX_ITERATIONS: usize = 200_000;
const MV_STATIONARITY: f64 = 1e-8;

/// Long-only mean-variance weights maximizing `mu'w - lambda/2 w'Sw` by
/// projected gradient ascent, with `mu` and `S` estimated from `history`
/// (`T x N` daily returns). A small ridge keeps `S` well conditioned.
pub fn strategy_mean_variance(history: &Matrix, lambda: f64) -> Result<Vec<f64>> {
    let n = history.cols();
    if n == 0 {
        return Err(Error::EmptyUniverse);
    }
    let t = history.rows();
    let mu: Vec<f64> = (0..n).map(|j| history.column(j).iter().sum::<f64>() / t.max(1) as f64).collect();
    let sigma = bl::sample_covariance(history)?;
    mean_variance_weights(&mu, &sigma, lambda)
}

pub fn mean_variance_weights(mu: &[f64], sigma: &Matrix, lambda: f64) -> Result<Vec<f64>> {
    let n = mu.len();
    if sigma.shape() != (n, n) {
        return Err(Error::DimensionMismatch("mean-variance inputs".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter("lambda must be positive".into()));
    }
    let trace: f64 = sigma.diag().iter().sum();
    let ridge = 1e-8 * (trace / n as f64).max(1e-12);
    let mut s = sigma.clone();
    for i in 0..n {
        s[(i, i)] += ridge;
    }
    // Gershgorin bound on the largest eigenvalue gives a safe step.
    let bound = (0..n)
        .map(|i| s.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let step = 1.0 / (lambda * bound);
    let mut w = vec![1.0 / n as f64; n];
    for _ in 0..MV_MAX_ITERATIONS {
        let sw = s.matvec(&w)?;
        let ascent: Vec<f64> = (0..n).map(|i| w[i] + step * (mu[i] - lambda * sw[i])).collect();
        let next = project_simplex(&ascent);
        let moved = next.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        w = next;
        if moved / step < MV_STATIONARITY {
            return Ok(w);
        }
    }
    Err(Error::NoConvergence(MV_MAX_ITERATIONS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlParams {
    pub lambda: f64,
    pub tau: f64,
    pub rf_daily: f64,
    pub lookback: usize,
}

impl Default for BlParams {
    fn default() -> Self {
        BlParams {
            lambda: bl::DEFAULT_LAMBDA,
            tau: bl::DEFAULT_TAU,
            rf_daily: 0.0,
            lookback: bl::DEFAULT_LOOKBACK,
        }
    }
}

/// Returns of the `lookback` days ending just before day `t`.
pub fn history_before(panel: &PricePanel, t: usize, lookback: usize) -> Matrix {
    let start = t.saturating_sub(lookback).max(1);
    panel.returns(start..t)
}

/// Black-Litterman weights for a position opened before day `t`, with
/// one absolute view per forecast return.
pub fn strategy_black_litterman(
    panel: &PricePanel,
    caps: &MarketCaps,
    t: usize,
    views: &[(String, f64)],
    params: &BlParams,
) -> Result<Vec<f64>> {
    let decision = panel.dates[t - 1];
    let w_mkt = strategy_market_weight(&caps_on(caps, &panel.tickers, decision)?, &panel.tickers)?;
    let excess = bl::excess_returns(&history_before(panel, t, params.lookback), params.rf_daily);
    let sigma = bl::sample_covariance(&excess)?;
    let inputs = MarketInputs {
        tickers: panel.tickers.clone(),
        sigma,
        w_mkt,
        lambda: params.lambda,
        tau: params.tau,
        rf: params.rf_daily,
    };
    let pi = bl::implied_returns(&inputs)?;
    let views = bl::build_views(views, &inputs.tickers, &inputs.sigma, params.tau)?;
    let post = bl::posterior(&pi, &inputs.sigma, &views, params.tau)?;
    bl::optimal_weights(&post, params.lambda)
}

/// Per-strategy counts of runs with the highest and lowest return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub holding_period: Option<usize>,
    pub runs: usize,
    pub strategies: Vec<String>,
    pub highest: Vec<usize>,
    pub lowest: Vec<usize>,
}

/// Ties credit every tying strategy, so counts may sum to more than the
/// number of runs.
pub fn tally_extremes(reports: &[&BacktestReport]) -> Result<Tally> {
    let first = reports.first().ok_or(Error::EmptyUniverse)?;
    if reports
        .iter()
        .any(|r| r.run_dates != first.run_dates || r.holding_period != first.holding_period)
    {
        return Err(Error::MisalignedRuns);
    }
    let k = reports.len();
    let mut tally = Tally {
        holding_period: first.holding_period,
        runs: first.run_returns.len(),
        strategies: reports.iter().map(|r| r.strategy.clone()).collect(),
        highest: vec![0; k],
        lowest: vec![0; k],
    };
    for run in 0..tally.runs {
        let vals: Vec<f64> = reports.iter().map(|r| r.run_returns[run]).collect();
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        for (s, v) in vals.iter().enumerate() {
            if *v == hi {
                tally.highest[s] += 1;
            }
            if *v == lo {
                tally.lowest[s] += 1;
            }
        }
    }
    Ok(tally)
}
