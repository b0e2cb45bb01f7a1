//! Seeded synthetic OHLCV panels built from sinusoids, a linear trend and
//! white noise at a chosen signal-to-noise ratio.

use std::f64::consts::PI;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{MarketCaps, OhlcvFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub assets: usize,
    pub days: usize,
    pub start: NaiveDate,
    /// Noise level relative to the clean close signal; `None` is noiseless.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            assets: 8,
            days: 900,
            start: NaiveDate::from_ymd_opt(2020, 1, 2).expect("valid date"),
            snr_db: Some(10.0),
            seed: 7,
        }
    }
}

/// One sinusoid `amplitude * sin(2 pi t / period + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

/// Clean close signal of one asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub level: f64,
    pub slope: f64,
    pub tones: Vec<Tone>,
}

impl SignalSpec {
    pub fn value(&self, t: usize) -> f64 {
        let t = t as f64;
        self.level
            + self.slope * t
            + self
                .tones
                .iter()
                .map(|c| c.amplitude * (2.0 * PI * t / c.period + c.phase).sin())
                .sum::<f64>()
    }

    pub fn series(&self, n: usize) -> Vec<f64> {
        (0..n).map(|t| self.value(t)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthAsset {
    pub frame: OhlcvFrame,
    pub clean_close: Vec<f64>,
    pub shares: f64,
}

#[derive(Debug, Clone)]
pub struct SynthMarket {
    pub assets: Vec<SynthAsset>,
    pub caps: MarketCaps,
}

impl SynthMarket {
    pub fn tickers(&self) -> Vec<String> {
        self.assets.iter().map(|a| a.frame.ticker.clone()).collect()
    }
}

/// Consecutive weekdays starting at `start` (moved forward off a weekend).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

/// White noise with `var(signal) / var(noise) = 10^(snr_db / 10)`.
pub fn add_noise(signal: &[f64], snr_db: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = signal.len().max(1) as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let power = signal.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sd).expect("finite noise level");
    signal.iter().map(|x| x + normal.sample(rng)).collect()
}

pub fn ticker_name(i: usize) -> String {
    format!("SYN{i:02}")
}

fn random_spec(rng: &mut ChaCha8Rng) -> SignalSpec {
    let level = rng.random_range(60.0..140.0);
    let tones = [(30.0, 60.0), (12.0, 25.0), (5.0, 9.0)]
        .iter()
        .map(|&(lo, hi)| Tone {
            amplitude: level * rng.random_range(0.02..0.06),
            period: rng.random_range(lo..hi),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    SignalSpec {
        level,
        slope: level * rng.random_range(-2e-4..4e-4),
        tones,
    }
}

/// Builds OHLCV channels around a close series. Open is the previous
/// close plus a small gap; high and low bracket open and close.
pub fn frame_from_close(
    ticker: &str,
    dates: Vec<NaiveDate>,
    close: Vec<f64>,
    rng: &mut impl Rng,
) -> Result<OhlcvFrame> {
    let n = close.len();
    let scale = close.iter().map(|c| c.abs()).sum::<f64>() / n.max(1) as f64;
    let gap = Normal::new(0.0, 0.002 * scale).expect("finite");
    let mut open = Vec::with_capacity(n);
    let mut high = Vec::with_capacity(n);
    let mut low = Vec::with_capacity(n);
    let mut volume = Vec::with_capacity(n);
    for t in 0..n {
        let o = close[t.saturating_sub(1)] + gap.sample(rng);
        let top = o.max(close[t]);
        let bottom = o.min(close[t]);
        open.push(o);
        high.push(top + 0.004 * scale * rng.random::<f64>());
        low.push(bottom - 0.004 * scale * rng.random::<f64>());
        let swing = if t == 0 { 0.0 } else { (close[t] - close[t - 1]).abs() / scale };
        volume.push(1e6 * (1.0 + 20.0 * swing + 0.2 * rng.random::<f64>()));
    }
    if low.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "synthetic prices for {ticker} are not positive"
        )));
    }
    OhlcvFrame::new(ticker, dates, [open, high, low, close, volume])
}

pub fn generate(config: &SynthConfig) -> Result<SynthMarket> {
    if config.assets == 0 {
        return Err(Error::InvalidParameter("synth.assets must be positive".into()));
    }
    if config.days < 2 {
        return Err(Error::InvalidParameter("synth.days must be at least 2".into()));
    }
    let dates = business_days(config.start, config.days);
    let mut caps = MarketCaps::default();
    let mut assets = Vec::with_capacity(config.assets);
    for i in 0..config.assets {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let spec = random_spec(&mut rng);
        let clean = spec.series(config.days);
        let close = match config.snr_db {
            Some(db) => add_noise(&clean, db, &mut rng),
            None => clean.clone(),
        };
        let ticker = ticker_name(i);
        let frame = frame_from_close(&ticker, dates.clone(), close, &mut rng)?;
        let shares = 1e7 * rng.random_range(1.0..20.0);
        for (d, c) in dates.iter().zip(frame.close()) {
            caps.insert(*d, ticker.clone(), shares * c);
        }
        assets.push(SynthAsset {
            frame,
            clean_close: clean,
            shares,
        });
    }
    Ok(SynthMarket { assets, caps })
}

/// `date,ticker,market_cap` rows matching [`crate::ingest::parse_market_caps`].
pub fn write_market_caps<W: std::io::Write>(market: &SynthMarket, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::io("<csv>", e.into());
    w.write_record(["date", "ticker", "market_cap"]).map_err(io)?;
    for asset in &market.assets {
        for (d, c) in asset.frame.dates.iter().zip(asset.frame.close()) {
            w.write_record([
                d.format(crate::ingest::DATE_FORMAT).to_string(),
                asset.frame.ticker.clone(),
                format!("{}", asset.shares * c),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
