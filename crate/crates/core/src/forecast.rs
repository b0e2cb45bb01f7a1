//! The per-asset forecasting pipeline: denoise, normalize, decompose,
//! align, one network per frequency group, then recombine.
//!
//! Each stage is a public function so callers can persist intermediate
//! artifacts; [`predict_stock`] chains them.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::emd::{self, ImfSet};
use crate::error::{Error, Result, StageExt};
use crate::ingest::{self, Channel, NormalizationParams, OhlcvFrame, SplitRanges, SplitSpec};
use crate::maemd::{self, AlignedImfGroups};
use crate::ssa;
use crate::tcn::{self, TcnConfig, TcnModel, TrainReport};

pub const MIN_PIPELINE_LENGTH: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsaSettings {
    pub enabled: bool,
    /// Embedding window; `None` picks [`ssa::default_window`].
    pub window: Option<usize>,
    pub energy_keep: f64,
}

impl Default for SsaSettings {
    fn default() -> Self {
        SsaSettings {
            enabled: true,
            window: None,
            energy_keep: ssa::DEFAULT_ENERGY_KEEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub ssa: SsaSettings,
    pub omega: usize,
    pub tcn: TcnConfig,
    pub split: SplitSpec,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ssa: SsaSettings::default(),
            omega: emd::DEFAULT_OMEGA,
            tcn: TcnConfig::default(),
            split: SplitSpec::default(),
            seed: 0,
        }
    }
}

/// Applies SSA to every channel, or returns the frame unchanged when
/// denoising is off.
pub fn denoise_frame(frame: &OhlcvFrame, settings: &SsaSettings) -> Result<OhlcvFrame> {
    if !settings.enabled {
        return Ok(frame.clone());
    }
    let window = settings.window.unwrap_or_else(|| ssa::default_window(frame.len()));
    let mut out = frame.clone();
    for c in Channel::ALL {
        out.channels[c.index()] = ssa::denoise(frame.channel(c), window, settings.energy_keep)?;
    }
    Ok(out)
}

/// Normalized channels and their IMFs, in [`Channel::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub ticker: String,
    pub norm: NormalizationParams,
    pub channels: Vec<ImfSet>,
}

impl Decomposition {
    pub fn channel(&self, c: Channel) -> &ImfSet {
        &self.channels[c.index()]
    }
}

pub fn decompose_frame(denoised: &OhlcvFrame, omega: usize) -> Result<Decomposition> {
    let (normalized, norm) = ingest::zscore_normalize(denoised)?;
    let channels = Channel::ALL
        .iter()
        .map(|&c| emd::decompose(normalized.channel(c), omega))
        .collect::<Result<Vec<_>>>()?;
    Ok(Decomposition {
        ticker: denoised.ticker.clone(),
        norm,
        channels,
    })
}

/// Groups every related channel's IMFs under the close IMFs.
pub fn align_decomposition(dec: &Decomposition) -> Result<AlignedImfGroups> {
    let related: Vec<(Channel, ImfSet)> = Channel::RELATED
        .iter()
        .map(|&c| (c, dec.channel(c).clone()))
        .collect();
    maemd::align(dec.channel(Channel::Close), &related)
}

/// Input channels of one network; channel 0 is the series it predicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSeries {
    pub label: String,
    pub channels: Vec<Vec<f64>>,
}

impl GroupSeries {
    pub fn target(&self) -> &[f64] {
        &self.channels[0]
    }

    fn refs(&self) -> Vec<&[f64]> {
        self.channels.iter().map(Vec::as_slice).collect()
    }
}

/// IMF groups labelled `imf_1`, `imf_2`, ... from high to low frequency,
/// then the `residual` group.
pub fn group_series(aligned: &AlignedImfGroups) -> Vec<GroupSeries> {
    aligned
        .all_channels()
        .into_iter()
        .enumerate()
        .map(|(i, chans)| GroupSeries {
            label: if i < aligned.groups.len() {
                format!("imf_{}", i + 1)
            } else {
                "residual".into()
            },
            channels: chans.into_iter().map(<[f64]>::to_vec).collect(),
        })
        .collect()
}

/// Training seed for one group, so groups and assets draw independent
/// but reproducible streams.
pub fn group_seed(seed: u64, ticker: &str, group: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in ticker.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ (group as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn train_group(
    series: &GroupSeries,
    ranges: &SplitRanges,
    config: &TcnConfig,
    seed: u64,
) -> Result<(TcnModel, TrainReport)> {
    let chans = series.refs();
    let train = tcn::make_windows_for_labels(&chans, config.window, ranges.train.clone())?;
    let val = tcn::make_windows_for_labels(&chans, config.window, ranges.val.clone())?;
    let cfg = TcnConfig {
        seed,
        ..config.clone()
    };
    let model = TcnModel::new(cfg.clone(), chans.len())?;
    tcn::train(model, &train, &val, &cfg)
}

/// Outcome of training one group. A failed group carries no model and is
/// forecast by persistence.
#[derive(Debug, Clone)]
pub struct GroupTraining {
    pub label: String,
    pub model: Option<TcnModel>,
    pub report: Option<TrainReport>,
    pub warning: Option<String>,
}

pub fn train_groups(ticker: &str, groups: &[GroupSeries], ranges: &SplitRanges, cfg: &PipelineConfig) -> Vec<GroupTraining> {
    groups
        .iter()
        .enumerate()
        .map(|(g, series)| {
            let seed = group_seed(cfg.seed, ticker, g);
            match train_group(series, ranges, &cfg.tcn, seed) {
                Ok((model, report)) => GroupTraining {
                    label: series.label.clone(),
                    model: Some(model),
                    report: Some(report),
                    warning: None,
                },
                Err(e) => {
                    let warning = format!("{ticker} {}: {e}; using persistence forecast", series.label);
                    log::warn!("{warning}");
                    GroupTraining {
                        label: series.label.clone(),
                        model: None,
                        report: None,
                        warning: Some(warning),
                    }
                }
            }
        })
        .collect()
}

/// Last observed value as the forecast for each index in `range`.
pub fn persistence(series: &[f64], range: std::ops::Range<usize>) -> Vec<f64> {
    range.map(|t| series[t.saturating_sub(1)]).collect()
}

/// One group's one-step-ahead predictions, in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupForecast {
    pub label: String,
    pub val_actual: Vec<f64>,
    pub val_predicted: Vec<f64>,
    pub test_actual: Vec<f64>,
    pub test_predicted: Vec<f64>,
    pub warning: Option<String>,
}

pub fn forecast_group(
    series: &GroupSeries,
    model: Option<&TcnModel>,
    ranges: &SplitRanges,
    warning: Option<String>,
) -> Result<GroupForecast> {
    let target = series.target();
    let predict = |range: &std::ops::Range<usize>| -> Result<Vec<f64>> {
        match model {
            Some(m) => {
                let ds = tcn::make_windows_for_labels(&series.refs(), m.config().window, range.clone())?;
                if ds.len() != range.len() {
                    return Err(Error::TooShort {
                        needed: m.config().window + 1,
                        got: range.start,
                    });
                }
                m.predict(&ds.inputs)
            }
            None => Ok(persistence(target, range.clone())),
        }
    };
    Ok(GroupForecast {
        label: series.label.clone(),
        val_actual: target[ranges.val.clone()].to_vec(),
        val_predicted: predict(&ranges.val)?,
        test_actual: target[ranges.test.clone()].to_vec(),
        test_predicted: predict(&ranges.test)?,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mape: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub ticker: String,
    pub dates: Vec<NaiveDate>,
    /// Observed close on each test date.
    pub actual: Vec<f64>,
    /// Sum of group forecasts, mapped back to price units.
    pub predicted: Vec<f64>,
    /// Observed close on the day before each test date.
    pub previous_close: Vec<f64>,
    pub metrics: Metrics,
    pub groups: Vec<GroupForecast>,
    pub warnings: Vec<String>,
}

impl ForecastResult {
    /// Forecast one-day returns, measured from the last observed close.
    pub fn predicted_returns(&self) -> Vec<f64> {
        self.predicted
            .iter()
            .zip(&self.previous_close)
            .map(|(p, c)| p / c - 1.0)
            .collect()
    }

    pub fn group(&self, label: &str) -> Option<&GroupForecast> {
        self.groups.iter().find(|g| g.label == label)
    }
}

/// Sums group forecasts, denormalizes with the close parameters and scores
/// against the raw close.
pub fn combine(
    frame: &OhlcvFrame,
    norm: &NormalizationParams,
    ranges: &SplitRanges,
    groups: Vec<GroupForecast>,
) -> Result<ForecastResult> {
    let n = ranges.test.len();
    let mut total = vec![0.0; n];
    for g in &groups {
        if g.test_predicted.len() != n {
            return Err(Error::LengthMismatch {
                left: g.test_predicted.len(),
                right: n,
            });
        }
        total.iter_mut().zip(&g.test_predicted).for_each(|(t, p)| *t += p);
    }
    let predicted = ingest::denormalize(&total, norm, Channel::Close);
    let close = frame.close();
    let actual = close[ranges.test.clone()].to_vec();
    let previous_close = ranges.test.clone().map(|t| close[t - 1]).collect();
    let metrics = Metrics {
        rmse: rmse(&actual, &predicted)?,
        mape: mape(&actual, &predicted)?,
        r2: r2(&actual, &predicted)?,
    };
    let warnings = groups.iter().filter_map(|g| g.warning.clone()).collect();
    Ok(ForecastResult {
        ticker: frame.ticker.clone(),
        dates: frame.dates[ranges.test.clone()].to_vec(),
        actual,
        predicted,
        previous_close,
        metrics,
        groups,
        warnings,
    })
}

pub fn check_length(frame: &OhlcvFrame) -> Result<()> {
    if frame.len() < MIN_PIPELINE_LENGTH {
        return Err(Error::TooShort {
            needed: MIN_PIPELINE_LENGTH,
            got: frame.len(),
        });
    }
    Ok(())
}

/// Runs the full pipeline for one asset. Errors carry the failing stage.
pub fn predict_stock(frame: &OhlcvFrame, cfg: &PipelineConfig) -> Result<ForecastResult> {
    check_length(frame).stage("ingest")?;
    cfg.tcn.validate().stage("train")?;
    let ranges = ingest::split(frame.len(), &cfg.split).stage("ingest")?;
    let denoised = denoise_frame(frame, &cfg.ssa).stage("denoise")?;
    let dec = decompose_frame(&denoised, cfg.omega).stage("decompose")?;
    let aligned = align_decomposition(&dec).stage("align")?;
    let groups = group_series(&aligned);
    let trained = train_groups(&frame.ticker, &groups, &ranges, cfg);
    let forecasts = groups
        .iter()
        .zip(trained)
        .map(|(s, t)| forecast_group(s, t.model.as_ref(), &ranges, t.warning))
        .collect::<Result<Vec<_>>>()
        .stage("predict")?;
    combine(frame, &dec.norm, &ranges, forecasts).stage("predict")
}

fn check_pair(actual: &[f64], predicted: &[f64]) -> Result<()> {
    if actual.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: actual.len(),
            right: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    let sse: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum();
    Ok((sse / actual.len() as f64).sqrt())
}

/// Mean absolute percentage error as a fraction.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    if let Some(i) = actual.iter().position(|&a| a == 0.0) {
        return Err(Error::ZeroActual(i));
    }
    let sum: f64 = actual.iter().zip(predicted).map(|(a, p)| ((a - p) / a).abs()).sum();
    Ok(sum / actual.len() as f64)
}

pub fn r2(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    if actual.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: actual.len(),
        });
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let sst: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    if !(sst > 0.0) {
        return Err(Error::ZeroVarianceActual);
    }
    let sse: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick_tcn() -> TcnConfig {
        TcnConfig {
            hidden_sizes: vec![8, 8],
            epochs: 30,
            learning_rate: 3e-3,
            ..TcnConfig::default()
        }
    }

    fn sine_frame(n: usize) -> OhlcvFrame {
        let close: Vec<f64> = (0..n)
            .map(|t| {
                let t = t as f64;
                100.0 + 10.0 * (2.0 * std::f64::consts::PI * t / 50.0).sin() + 0.02 * t
            })
            .collect();
        let dates = synth::business_days(NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(), n);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        synth::frame_from_close("SINE", dates, close, &mut rng).unwrap()
    }

    #[test]
    fn metric_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
        assert_eq!(mape(&[5.0, 7.0], &[5.0, 7.0]).unwrap(), 0.0);
        assert!((mape(&[100.0], &[101.0]).unwrap() - 0.01).abs() < 1e-15);
        assert!(matches!(mape(&[1.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroActual(1))));
        let a = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r2(&a, &a).unwrap(), 1.0);
        assert!(r2(&a, &[3.5; 4]).unwrap().abs() < 1e-15);
        assert!(matches!(r2(&[2.0, 2.0], &[1.0, 3.0]), Err(Error::ZeroVarianceActual)));
    }

    #[test]
    fn worse_than_mean_gives_negative_r2() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let p = [4.0, 3.0, 2.0, 1.0];
        // SSE = 9+1+1+9 = 20, SST = 5
        assert!((r2(&a, &p).unwrap() - (1.0 - 20.0 / 5.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn rmse_is_translation_invariant(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40),
            c in -1e3f64..1e3,
        ) {
            let (a, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let a2: Vec<f64> = a.iter().map(|x| x + c).collect();
            let p2: Vec<f64> = p.iter().map(|x| x + c).collect();
            prop_assert!((rmse(&a, &p).unwrap() - rmse(&a2, &p2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn metrics_are_permutation_covariant(
            pairs in prop::collection::vec((1.0f64..100.0, 1.0f64..100.0), 3..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let (a, p): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (a2, p2): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
            prop_assert!((rmse(&a, &p).unwrap() - rmse(&a2, &p2).unwrap()).abs() < 1e-9);
            prop_assert!((mape(&a, &p).unwrap() - mape(&a2, &p2).unwrap()).abs() < 1e-12);
            if let (Ok(x), Ok(y)) = (r2(&a, &p), r2(&a2, &p2)) {
                prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn short_frame_is_rejected() {
        let frame = sine_frame(100);
        let err = predict_stock(&frame, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Stage { source, .. } if matches!(*source, Error::TooShort { needed: 200, got: 100 })));
    }

    #[test]
    fn groups_recombine_to_denoised_close() {
        let market = synth::generate(&synth::SynthConfig {
            assets: 1,
            days: 400,
            ..Default::default()
        })
        .unwrap();
        let frame = &market.assets[0].frame;
        let denoised = denoise_frame(frame, &SsaSettings::default()).unwrap();
        let dec = decompose_frame(&denoised, emd::DEFAULT_OMEGA).unwrap();
        let groups = group_series(&align_decomposition(&dec).unwrap());
        assert_eq!(groups.last().unwrap().label, "residual");
        assert_eq!(groups[0].label, "imf_1");
        assert!(groups.iter().all(|g| g.channels.len() == 5));
        let mut sum = vec![0.0; frame.len()];
        for g in &groups {
            sum.iter_mut().zip(g.target()).for_each(|(s, v)| *s += v);
        }
        let back = ingest::denormalize(&sum, &dec.norm, Channel::Close);
        for (b, d) in back.iter().zip(denoised.close()) {
            assert!((b - d).abs() < 1e-6, "{b} vs {d}");
        }
    }

    #[test]
    fn persistence_uses_previous_value() {
        assert_eq!(persistence(&[1.0, 2.0, 3.0, 4.0], 2..4), vec![2.0, 3.0]);
    }

    #[test]
    fn group_seeds_differ_and_repeat() {
        assert_eq!(group_seed(1, "A", 0), group_seed(1, "A", 0));
        assert_ne!(group_seed(1, "A", 0), group_seed(1, "A", 1));
        assert_ne!(group_seed(1, "A", 0), group_seed(1, "B", 0));
        assert_ne!(group_seed(1, "A", 0), group_seed(2, "A", 0));
    }

    #[test]
    fn smooth_signal_is_forecast_well_and_deterministically() {
        let frame = sine_frame(600);
        let cfg = PipelineConfig {
            tcn: quick_tcn(),
            seed: 11,
            ..PipelineConfig::default()
        };
        let a = predict_stock(&frame, &cfg).unwrap();
        assert!(a.metrics.r2 > 0.95, "{:?}", a.metrics);
        assert_eq!(a.predicted.len(), 90);
        assert_eq!(a.dates.len(), 90);
        assert_eq!(a.actual, frame.close()[510..].to_vec());
        let b = predict_stock(&frame, &cfg).unwrap();
        assert_eq!(a, b);
        let ret = a.predicted_returns();
        assert!((ret[0] - (a.predicted[0] / frame.close()[509] - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn failed_group_falls_back_to_persistence() {
        let series = GroupSeries {
            label: "imf_1".into(),
            channels: vec![(0..40).map(f64::from).collect()],
        };
        let ranges = ingest::split(40, &SplitSpec::default()).unwrap();
        let f = forecast_group(&series, None, &ranges, Some("w".into())).unwrap();
        assert_eq!(f.test_predicted, f.test_actual.iter().map(|x| x - 1.0).collect::<Vec<_>>());
        assert_eq!(f.warning.as_deref(), Some("w"));
    }
}
