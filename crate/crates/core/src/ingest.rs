//! Daily OHLCV loading, z-score normalization, returns and the
//! chronological train/validation/test partition.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Open,
    High,
    Low,
    Close,
    Volume,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::Open,
        Channel::High,
        Channel::Low,
        Channel::Close,
        Channel::Volume,
    ];

    /// Channels other than Close, in the order they feed the predictor.
    pub const RELATED: [Channel; 4] = [Channel::Open, Channel::High, Channel::Low, Channel::Volume];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Open => "open",
            Channel::High => "high",
            Channel::Low => "low",
            Channel::Close => "close",
            Channel::Volume => "volume",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Daily multichannel series for one asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcvFrame {
    pub ticker: String,
    pub dates: Vec<NaiveDate>,
    /// Indexed by [`Channel::index`].
    pub channels: [Vec<f64>; 5],
}

impl OhlcvFrame {
    /// Builds a frame, checking the length and date-ordering invariants.
    /// Value positivity is left to [`OhlcvFrame::validate_prices`] because
    /// denoised frames can legitimately dip below zero.
    pub fn new(ticker: impl Into<String>, dates: Vec<NaiveDate>, channels: [Vec<f64>; 5]) -> Result<Self> {
        let n = dates.len();
        if n < 2 {
            return Err(Error::TooShort { needed: 2, got: n });
        }
        if let Some(c) = channels.iter().find(|c| c.len() != n) {
            return Err(Error::LengthMismatch {
                left: n,
                right: c.len(),
            });
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::DuplicateDate(w[1]));
        }
        Ok(OhlcvFrame {
            ticker: ticker.into(),
            dates,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn channel(&self, c: Channel) -> &[f64] {
        &self.channels[c.index()]
    }

    pub fn close(&self) -> &[f64] {
        self.channel(Channel::Close)
    }

    pub fn validate_prices(&self) -> Result<()> {
        for c in Channel::ALL {
            for (i, &v) in self.channel(c).iter().enumerate() {
                let ok = v.is_finite() && if c == Channel::Volume { v >= 0.0 } else { v > 0.0 };
                if !ok {
                    return Err(Error::InvalidValue {
                        line: i + 2,
                        column: c.name().into(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn ticker_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a `date,open,high,low,close,volume` CSV. Column order is free
/// and header matching is case-insensitive; extra columns are ignored.
pub fn load_ohlcv(path: &Path) -> Result<OhlcvFrame> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_ohlcv(&ticker_from_path(path), &text)
}

pub fn parse_ohlcv(ticker: &str, text: &str) -> Result<OhlcvFrame> {
    parse_rows(ticker, text, true)
}

/// Like [`parse_ohlcv`] but only requires finite values, for reading back
/// denoised frames.
pub fn parse_ohlcv_lenient(ticker: &str, text: &str) -> Result<OhlcvFrame> {
    parse_rows(ticker, text, false)
}

fn parse_rows(ticker: &str, text: &str, strict: bool) -> Result<OhlcvFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|_| Error::UnparsableRow(1))?.clone();
    let lookup: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_ascii_lowercase(), i))
        .collect();
    let col = |name: &str| {
        lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.into()))
    };
    let date_col = col("date")?;
    let value_cols = Channel::ALL.map(|c| col(c.name()));
    let value_cols = {
        let mut out = [0usize; 5];
        for (slot, c) in out.iter_mut().zip(value_cols) {
            *slot = c?;
        }
        out
    };

    let mut rows: BTreeMap<NaiveDate, [f64; 5]> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|_| Error::UnparsableRow(line))?;
        let date = record
            .get(date_col)
            .and_then(|s| NaiveDate::parse_from_str(s, DATE_FORMAT).ok())
            .ok_or(Error::UnparsableRow(line))?;
        let mut values = [0.0; 5];
        for (v, &c) in values.iter_mut().zip(&value_cols) {
            *v = record
                .get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or(Error::UnparsableRow(line))?;
        }
        for (ch, &v) in Channel::ALL.iter().zip(&values) {
            let positive = if *ch == Channel::Volume { v >= 0.0 } else { v > 0.0 };
            if !v.is_finite() || (strict && !positive) {
                return Err(Error::InvalidValue {
                    line,
                    column: ch.name().into(),
                });
            }
        }
        if rows.insert(date, values).is_some() {
            return Err(Error::DuplicateDate(date));
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile);
    }

    let dates: Vec<NaiveDate> = rows.keys().copied().collect();
    let mut channels: [Vec<f64>; 5] = Default::default();
    for values in rows.values() {
        for (c, &v) in channels.iter_mut().zip(values) {
            c.push(v);
        }
    }
    OhlcvFrame::new(ticker, dates, channels)
}

/// Writes a frame in the same CSV layout [`load_ohlcv`] reads.
pub fn write_ohlcv<W: std::io::Write>(frame: &OhlcvFrame, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::io("<csv>", e.into());
    w.write_record(["date", "open", "high", "low", "close", "volume"])
        .map_err(csv_err)?;
    for (i, d) in frame.dates.iter().enumerate() {
        let mut rec = vec![d.format(DATE_FORMAT).to_string()];
        rec.extend(frame.channels.iter().map(|c| c[i].to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Market capitalizations by date and ticker.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarketCaps {
    by_date: BTreeMap<NaiveDate, BTreeMap<String, f64>>,
}

impl MarketCaps {
    pub fn insert(&mut self, date: NaiveDate, ticker: impl Into<String>, cap: f64) {
        self.by_date.entry(date).or_default().insert(ticker.into(), cap);
    }

    /// Most recent cap for `ticker` on or before `date`.
    pub fn cap_on(&self, ticker: &str, date: NaiveDate) -> Option<f64> {
        self.by_date
            .range(..=date)
            .rev()
            .find_map(|(_, caps)| caps.get(ticker).copied())
    }

    pub fn is_empty(&self) -> bool {
        self.by_date.is_empty()
    }
}

/// Loads the `date,ticker,market_cap` sidecar.
pub fn load_market_caps(path: &Path) -> Result<MarketCaps> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_market_caps(&text)
}

pub fn parse_market_caps(text: &str) -> Result<MarketCaps> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|_| Error::UnparsableRow(1))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn(name.into()))
    };
    let (dc, tc, mc) = (find("date")?, find("ticker")?, find("market_cap")?);
    let mut caps = MarketCaps::default();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|_| Error::UnparsableRow(line))?;
        let date = record
            .get(dc)
            .and_then(|s| NaiveDate::parse_from_str(s, DATE_FORMAT).ok())
            .ok_or(Error::UnparsableRow(line))?;
        let ticker = record.get(tc).ok_or(Error::UnparsableRow(line))?;
        let cap: f64 = record
            .get(mc)
            .and_then(|s| s.parse().ok())
            .ok_or(Error::UnparsableRow(line))?;
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::InvalidValue {
                line,
                column: "market_cap".into(),
            });
        }
        caps.insert(date, ticker, cap);
    }
    if caps.is_empty() {
        return Err(Error::EmptyFile);
    }
    Ok(caps)
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

pub fn mean_std(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn zscore_normalize(frame: &OhlcvFrame) -> Result<(OhlcvFrame, NormalizationParams)> {
    let mut params = NormalizationParams {
        mean: [0.0; 5],
        std: [1.0; 5],
    };
    let mut out = frame.clone();
    for c in Channel::ALL {
        let series = frame.channel(c);
        let (mean, std) = mean_std(series);
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ZeroVariance(c));
        }
        params.mean[c.index()] = mean;
        params.std[c.index()] = std;
        out.channels[c.index()] = series.iter().map(|x| (x - mean) / std).collect();
    }
    Ok((out, params))
}

pub fn denormalize(series: &[f64], params: &NormalizationParams, channel: Channel) -> Vec<f64> {
    let (mean, std) = (params.mean[channel.index()], params.std[channel.index()]);
    series.iter().map(|z| z * std + mean).collect()
}

/// Simple returns `p[t]/p[t-1] - 1`.
pub fn to_returns(prices: &[f64]) -> Result<Vec<f64>> {
    if prices.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: prices.len(),
        });
    }
    if let Some(i) = prices.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::NonPositivePrice(i));
    }
    Ok(prices.windows(2).map(|w| w[1] / w[0] - 1.0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.15,
            test_frac: 0.15,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f > 0.0)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "split fractions {fracs:?} must be positive and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub const MIN_SPLIT_LENGTH: usize = 10;

/// Chronological partition; validation and test take `floor(frac * n)`
/// and the remainder goes to training.
pub fn split(n: usize, spec: &SplitSpec) -> Result<SplitRanges> {
    spec.validate()?;
    if n < MIN_SPLIT_LENGTH {
        return Err(Error::TooShort {
            needed: MIN_SPLIT_LENGTH,
            got: n,
        });
    }
    // The epsilon keeps exact products such as 0.15 * 100 from flooring to 14.
    let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let val = floor(spec.val_frac);
    let test = floor(spec.test_frac);
    let train = n - val - test;
    Ok(SplitRanges {
        train: 0..train,
        val: train..train + val,
        test: train + val..n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CSV3: &str = "date,open,high,low,close,volume\n\
        2020-01-03,1,2,0.5,1.5,100\n\
        2020-01-02,1,2,0.5,1.4,100\n\
        2020-01-06,1,2,0.5,1.6,0\n";

    #[test]
    fn lenient_parse_accepts_negative_values() {
        let text = "date,open,high,low,close,volume\n2020-01-02,-1,2,0.5,1.5,-3\n2020-01-03,1,2,0.5,1.4,1\n";
        assert!(matches!(parse_ohlcv("X", text), Err(Error::InvalidValue { .. })));
        let f = parse_ohlcv_lenient("X", text).unwrap();
        assert_eq!(f.channel(Channel::Volume)[0], -3.0);
        let bad = text.replace("-3", "NaN");
        assert!(parse_ohlcv_lenient("X", &bad).is_err());
    }

    #[test]
    fn parses_and_sorts_rows() {
        let f = parse_ohlcv("X", CSV3).unwrap();
        assert_eq!(f.len(), 3);
        assert!(f.dates.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(f.close(), &[1.4, 1.5, 1.6]);
    }

    #[test]
    fn header_is_case_insensitive() {
        let text = CSV3.replace("date,open,high,low,close,volume", "Date,Open,HIGH,Low,Close,Volume");
        assert_eq!(parse_ohlcv("X", &text).unwrap().len(), 3);
    }

    #[test]
    fn adj_close_is_not_close() {
        let text = "date,open,high,low,Adj Close,volume\n2020-01-02,1,2,0.5,1.4,100\n";
        assert!(matches!(parse_ohlcv("X", text), Err(Error::MissingColumn(c)) if c == "close"));
    }

    #[test]
    fn duplicate_dates_rejected() {
        let text = "date,open,high,low,close,volume\n\
            2020-01-02,1,2,0.5,1.4,100\n2020-01-02,1,2,0.5,1.5,100\n";
        let d = NaiveDate::from_ymd_opt(2020, 1, 2).unwrap();
        assert!(matches!(parse_ohlcv("X", text), Err(Error::DuplicateDate(x)) if x == d));
    }

    #[test]
    fn bad_rows() {
        let header = "date,open,high,low,close,volume\n";
        assert!(matches!(parse_ohlcv("X", header), Err(Error::EmptyFile)));
        let bad_date = format!("{header}01/02/2020,1,2,0.5,1.4,100\n");
        assert!(matches!(parse_ohlcv("X", &bad_date), Err(Error::UnparsableRow(2))));
        let neg = format!("{header}2020-01-02,1,2,0.5,-1.4,100\n2020-01-03,1,2,0.5,1.4,100\n");
        assert!(matches!(parse_ohlcv("X", &neg), Err(Error::InvalidValue { line: 2, .. })));
    }

    #[test]
    fn load_from_file_uses_stem_as_ticker() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("MSFT.csv");
        std::fs::write(&p, CSV3).unwrap();
        assert_eq!(load_ohlcv(&p).unwrap().ticker, "MSFT");
    }

    #[test]
    fn market_caps_lookup_carries_forward() {
        let caps = parse_market_caps(
            "date,ticker,market_cap\n2020-01-02,A,3\n2020-01-02,B,1\n2020-01-06,A,4\n",
        )
        .unwrap();
        let d = |day| NaiveDate::from_ymd_opt(2020, 1, day).unwrap();
        assert_eq!(caps.cap_on("A", d(3)), Some(3.0));
        assert_eq!(caps.cap_on("A", d(7)), Some(4.0));
        assert_eq!(caps.cap_on("B", d(7)), Some(1.0));
        assert_eq!(caps.cap_on("A", d(1)), None);
    }

    fn frame_with_close(close: Vec<f64>) -> OhlcvFrame {
        let n = close.len();
        let dates = (0..n)
            .map(|i| NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i as u64))
            .collect();
        let ramp: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        OhlcvFrame::new(
            "T",
            dates,
            [ramp.clone(), ramp.clone(), ramp.clone(), close, ramp],
        )
        .unwrap()
    }

    #[test]
    fn zscore_uses_population_std() {
        let (z, p) = zscore_normalize(&frame_with_close(vec![1.0, 2.0, 3.0])).unwrap();
        let sd = (2.0f64 / 3.0).sqrt();
        let expected = [-1.0 / sd, 0.0, 1.0 / sd];
        for (a, b) in z.close().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p.mean[Channel::Close.index()], 2.0);
        assert!((p.std[Channel::Close.index()] - sd).abs() < 1e-15);
    }

    #[test]
    fn zscore_rejects_constant_channel() {
        let err = zscore_normalize(&frame_with_close(vec![5.0, 5.0, 5.0])).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance(Channel::Close)));
    }

    #[test]
    fn denormalize_examples() {
        let mut p = NormalizationParams {
            mean: [0.0; 5],
            std: [1.0; 5],
        };
        p.mean[3] = 3.0;
        p.std[3] = 2.0;
        assert_eq!(denormalize(&[0.0, 0.0], &p, Channel::Close), vec![3.0, 3.0]);
        assert_eq!(denormalize(&[1.0], &p, Channel::Open), vec![1.0]);
    }

    #[test]
    fn returns_examples() {
        let r = to_returns(&[100.0, 110.0]).unwrap();
        assert!((r[0] - 0.10).abs() < 1e-15);
        assert_eq!(to_returns(&[100.0, 100.0, 100.0]).unwrap(), vec![0.0, 0.0]);
        let r = to_returns(&[100.0, 90.0, 99.0]).unwrap();
        assert!((r[0] + 0.10).abs() < 1e-15 && (r[1] - 0.10).abs() < 1e-15);
        assert!(matches!(to_returns(&[1.0]), Err(Error::TooShort { .. })));
        assert!(matches!(to_returns(&[1.0, 0.0]), Err(Error::NonPositivePrice(1))));
    }

    #[test]
    fn split_examples() {
        let s = SplitSpec::default();
        let r = split(100, &s).unwrap();
        assert_eq!((r.train.len(), r.val.len(), r.test.len()), (70, 15, 15));
        let r = split(10, &s).unwrap();
        assert_eq!((r.train.len(), r.val.len(), r.test.len()), (8, 1, 1));
        assert!(matches!(split(9, &s), Err(Error::TooShort { .. })));
        let bad = SplitSpec {
            train_frac: 0.5,
            val_frac: 0.2,
            test_frac: 0.2,
        };
        assert!(split(100, &bad).is_err());
    }

    proptest! {
        #[test]
        fn normalize_denormalize_identity(
            close in proptest::collection::vec(1.0f64..1000.0, 3..60)
        ) {
            prop_assume!(mean_std(&close).1 > 1e-6);
            let f = frame_with_close(close.clone());
            let (z, p) = zscore_normalize(&f).unwrap();
            let (m, s) = mean_std(z.close());
            prop_assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
            let back = denormalize(z.close(), &p, Channel::Close);
            for (a, b) in back.iter().zip(&close) {
                prop_assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
            }
        }

        #[test]
        fn geometric_series_has_constant_return(
            start in 1.0f64..100.0, r in -0.5f64..0.5, n in 2usize..50
        ) {
            let prices: Vec<f64> = (0..n).map(|i| start * (1.0 + r).powi(i as i32)).collect();
            for x in to_returns(&prices).unwrap() {
                prop_assert!((x - r).abs() < 1e-12);
            }
        }

        #[test]
        fn split_is_a_partition(n in 10usize..5000, a in 0.05f64..0.9, b in 0.05f64..0.5) {
            prop_assume!(a + b < 0.95);
            let spec = SplitSpec { train_frac: a, val_frac: b, test_frac: 1.0 - a - b };
            prop_assume!(spec.validate().is_ok());
            let r = split(n, &spec).unwrap();
            prop_assert_eq!(r.train.start, 0);
            prop_assert_eq!(r.train.end, r.val.start);
            prop_assert_eq!(r.val.end, r.test.start);
            prop_assert_eq!(r.test.end, n);
        }
    }
}
