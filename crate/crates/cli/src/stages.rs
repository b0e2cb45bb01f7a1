//! Stage commands. Each reads the previous stage's artifacts from the
//! output directory, so stages can be run one at a time or chained by
//! [`cmd_run_all`].

use std::path::Path;

use blcast_core::backtest::{self as bt, BacktestReport, PricePanel, Tally};
use blcast_core::forecast::{self, Decomposition, ForecastResult, Metrics};
use blcast_core::ingest::{self, NormalizationParams};
use blcast_core::synth::{self, SynthConfig};
use blcast_core::{Channel, Error as CoreError, OhlcvFrame, TcnModel};
use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::{RunConfig, MARKET_CAPS_FILE};
use crate::error::{CliError, CliResult, InStage};

pub const STRATEGIES: [&str; 4] = ["BL", "MV", "EW", "MW"];

/// Validated config plus the resolved universe.
struct Run<'a> {
    cfg: &'a RunConfig,
    tickers: Vec<String>,
    layout: Layout,
    pool: rayon::ThreadPool,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig) -> CliResult<Self> {
        cfg.validate()?;
        let tickers = cfg.resolve_tickers()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| CliError::config("workers", e.to_string()))?;
        Ok(Run {
            cfg,
            tickers,
            layout: Layout::new(&cfg.output_dir),
            pool,
        })
    }

    /// Runs `job` per ticker on the pool. Results keep ticker order and the
    /// first failure in that order wins.
    fn per_ticker<R: Send>(&self, job: impl Fn(&str) -> CliResult<R> + Sync) -> CliResult<Vec<R>> {
        let results: Vec<CliResult<R>> = self.pool.install(|| self.tickers.par_iter().map(|t| job(t)).collect());
        results.into_iter().collect()
    }

    fn load_raw(&self, ticker: &str, stage: &'static str) -> CliResult<OhlcvFrame> {
        ingest::load_ohlcv(&self.cfg.data_dir.join(format!("{ticker}.csv"))).in_stage(stage, ticker)
    }
}

pub fn cmd_synth(out: &Path, cfg: &SynthConfig) -> CliResult<()> {
    let market = synth::generate(cfg).in_stage("synth", "market")?;
    for asset in &market.assets {
        let mut bytes = Vec::new();
        ingest::write_ohlcv(&asset.frame, &mut bytes).in_stage("synth", &asset.frame.ticker)?;
        write_atomic(&out.join(format!("{}.csv", asset.frame.ticker)), &bytes, "synth")?;
        let rows = asset
            .frame
            .dates
            .iter()
            .zip(&asset.clean_close)
            .map(|(d, c)| [date(*d), num(*c)]);
        let clean = csv_bytes(&["date".into(), "close".into()], rows);
        write_atomic(&out.join("clean").join(format!("{}.csv", asset.frame.ticker)), &clean, "synth")?;
    }
    let mut caps = Vec::new();
    synth::write_market_caps(&market, &mut caps).in_stage("synth", "market caps")?;
    write_atomic(&out.join(MARKET_CAPS_FILE), &caps, "synth")
}

pub fn cmd_denoise(cfg: &RunConfig) -> CliResult<()> {
    let run = Run::new(cfg)?;
    denoise(&run)
}

fn denoise(run: &Run) -> CliResult<()> {
    let settings = run.cfg.pipeline().ssa;
    run.per_ticker(|t| {
        let frame = run.load_raw(t, "ingest")?;
        forecast::check_length(&frame).in_stage("ingest", t)?;
        let denoised = forecast::denoise_frame(&frame, &settings).in_stage("denoise", t)?;
        let mut bytes = Vec::new();
        ingest::write_ohlcv(&denoised, &mut bytes).in_stage("denoise", t)?;
        write_atomic(&run.layout.denoised(t), &bytes, "denoise")
    })?;
    Ok(())
}

pub fn cmd_decompose(cfg: &RunConfig) -> CliResult<()> {
    let run = Run::new(cfg)?;
    decompose(&run)
}

fn decompose(run: &Run) -> CliResult<()> {
    run.per_ticker(|t| {
        let text = read_artifact(&run.layout.denoised(t), "denoise", "decompose")?;
        let denoised = ingest::parse_ohlcv_lenient(t, &text).in_stage("decompose", t)?;
        let dec = forecast::decompose_frame(&denoised, run.cfg.emd.omega).in_stage("decompose", t)?;
        for c in Channel::ALL {
            write_atomic(&run.layout.imf_channel(t, c), &imf_csv(dec.channel(c)), "decompose")?;
        }
        write_json(&run.layout.normalization(t), &dec.norm, "decompose")
    })?;
    Ok(())
}

fn load_decomposition(run: &Run, ticker: &str) -> CliResult<Decomposition> {
    let norm: NormalizationParams = read_json(&run.layout.normalization(ticker), "decompose", "align")?;
    let channels = Channel::ALL
        .iter()
        .map(|&c| {
            let path = run.layout.imf_channel(ticker, c);
            parse_imf_csv(&read_artifact(&path, "decompose", "align")?, ticker)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Decomposition {
        ticker: ticker.into(),
        norm,
        channels,
    })
}

pub fn cmd_align(cfg: &RunConfig) -> CliResult<()> {
    let run = Run::new(cfg)?;
    align(&run)
}

fn align(run: &Run) -> CliResult<()> {
    run.per_ticker(|t| {
        let dec = load_decomposition(run, t)?;
        let aligned = forecast::align_decomposition(&dec).in_stage("align", t)?;
        write_json(&run.layout.aligned(t), &AlignedArtifact::new(t, aligned), "align")
    })?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let run = Run::new(cfg)?;
    train(&run)
}

fn train(run: &Run) -> CliResult<()> {
    let pipeline = run.cfg.pipeline();
    run.per_ticker(|t| {
        let art: AlignedArtifact = read_json(&run.layout.aligned(t), "align", "train")?;
        let groups = forecast::group_series(&art.aligned);
        let n = groups[0].target().len();
        let ranges = ingest::split(n, &pipeline.split).in_stage("train", t)?;
        let trained = forecast::train_groups(t, &groups, &ranges, &pipeline);
        let mut entries = Vec::with_capacity(trained.len());
        for g in trained {
            let checkpoint = match &g.model {
                Some(model) => {
                    let path = run.layout.model(t, &g.label);
                    let json = model.to_json().in_stage("train", t)?;
                    write_atomic(&path, json.as_bytes(), "train")?;
                    Some(format!("{}.json", g.label))
                }
                None => None,
            };
            entries.push(ModelEntry {
                label: g.label,
                checkpoint,
                warning: g.warning,
                report: g.report,
            });
        }
        let manifest = ModelManifest {
            ticker: t.into(),
            groups: entries,
        };
        write_json(&run.layout.model_manifest(t), &manifest, "train")
    })?;
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> CliResult<()> {
    let run = Run::new(cfg)?;
    predict(&run)
}

fn predict(run: &Run) -> CliResult<()> {
    let spec = run.cfg.split_spec();
    run.per_ticker(|t| {
        let frame = run.load_raw(t, "predict")?;
        let ranges = ingest::split(frame.len(), &spec).in_stage("predict", t)?;
        let norm: NormalizationParams = read_json(&run.layout.normalization(t), "decompose", "predict")?;
        let art: AlignedArtifact = read_json(&run.layout.aligned(t), "align", "predict")?;
        let manifest: ModelManifest = read_json(&run.layout.model_manifest(t), "train", "predict")?;
        let groups = forecast::group_series(&art.aligned);
        if manifest.groups.len() != groups.len()
            || manifest.groups.iter().zip(&groups).any(|(e, g)| e.label != g.label)
        {
            return Err(CliError::stage(
                "predict",
                t,
                CoreError::ShapeMismatch("model manifest does not match aligned groups; rerun train".into()),
            ));
        }
        let mut forecasts = Vec::with_capacity(groups.len());
        for (series, entry) in groups.iter().zip(&manifest.groups) {
            let model = match &entry.checkpoint {
                Some(file) => {
                    let path = run.layout.model(t, file.trim_end_matches(".json"));
                    let text = read_artifact(&path, "train", "predict")?;
                    Some(TcnModel::from_json(&text).in_stage("predict", t)?)
                }
                None => None,
            };
            forecasts.push(
                forecast::forecast_group(series, model.as_ref(), &ranges, entry.warning.clone())
                    .in_stage("predict", t)?,
            );
        }
        let result = forecast::combine(&frame, &norm, &ranges, forecasts).in_stage("predict", t)?;
        write_json(&run.layout.forecast_json(t), &result, "predict")?;
        let rows = (0..result.dates.len()).map(|i| {
            [
                date(result.dates[i]),
                num(result.actual[i]),
                num(result.predicted[i]),
                num(result.previous_close[i]),
            ]
        });
        let header = ["date", "actual", "predicted", "previous_close"].map(String::from);
        write_atomic(&run.layout.forecast_csv(t), &csv_bytes(&header, rows), "predict")
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub trading_days_per_year: f64,
    pub annualization: String,
    pub sharpe: String,
    pub tally_ties: String,
    pub bl_fallback: String,
}

impl Conventions {
    fn current() -> Self {
        Conventions {
            trading_days_per_year: bt::TRADING_DAYS,
            annualization: "rolling: (1 + mean run return)^(252/h) - 1; rebalancing: daily, h = 1".into(),
            sharpe: "annualized mean excess return over annualized sample std; rf = rf_daily * days per run".into(),
            tally_ties: "a tie credits every tying strategy, so counts may exceed runs".into(),
            bl_fallback: "days where BL weights fail use MW weights and add a warning".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub ticker: String,
    pub metrics: Metrics,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub conventions: Conventions,
    pub tickers: Vec<String>,
    pub strategies: Vec<String>,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub test_days: usize,
    pub cost_rate: f64,
    pub forecasts: Vec<ForecastSummary>,
    pub rolling: Vec<BacktestReport>,
    pub rebalancing: Vec<BacktestReport>,
    pub tallies: Vec<Tally>,
    pub warnings: Vec<String>,
}

pub fn cmd_backtest(cfg: &RunConfig) -> CliResult<()> {
    let run = Run::new(cfg)?;
    backtest(&run)
}

/// Daily target weights of every strategy over the test window.
struct DailyWeights {
    strategy: &'static str,
    weights: Vec<Vec<f64>>,
}

fn backtest(run: &Run) -> CliResult<()> {
    let forecasts: Vec<ForecastResult> = run
        .tickers
        .iter()
        .map(|t| read_json(&run.layout.forecast_json(t), "forecast", "backtest"))
        .collect::<CliResult<_>>()?;
    let frames = run
        .tickers
        .iter()
        .map(|t| run.load_raw(t, "backtest"))
        .collect::<CliResult<Vec<_>>>()?;
    let panel = PricePanel::from_frames(&frames).in_stage("backtest", "price panel")?;
    let caps = ingest::load_market_caps(&run.cfg.market_caps_path()).in_stage("backtest", "market caps")?;

    let test_dates = &forecasts[0].dates;
    let start = test_dates
        .first()
        .and_then(|d| panel.dates.iter().position(|p| p == d))
        .filter(|&s| s >= 1 && panel.dates.get(s..s + test_dates.len()) == Some(test_dates.as_slice()))
        .ok_or_else(|| {
            CliError::stage(
                "backtest",
                "forecast",
                CoreError::DimensionMismatch("forecast dates are not a window of the price data".into()),
            )
        })?;
    if let Some(f) = forecasts.iter().find(|f| &f.dates != test_dates) {
        return Err(CliError::stage("backtest", &f.ticker, CoreError::MisalignedRuns));
    }
    let test = start..start + test_dates.len();
    let view_returns: Vec<Vec<f64>> = forecasts.iter().map(ForecastResult::predicted_returns).collect();

    let params = run.cfg.bl_params();
    let mut warnings: Vec<String> = forecasts.iter().flat_map(|f| f.warnings.clone()).collect();
    let mut daily: Vec<DailyWeights> = STRATEGIES
        .iter()
        .map(|&s| DailyWeights {
            strategy: s,
            weights: Vec::with_capacity(test.len()),
        })
        .collect();
    for t in test.clone() {
        let day = panel.dates[t];
        let mw = bt::caps_on(&caps, &panel.tickers, panel.dates[t - 1])
            .and_then(|c| bt::strategy_market_weight(&c, &panel.tickers))
            .in_stage("backtest", &format!("MW on {day}"))?;
        let views: Vec<(String, f64)> = run
            .tickers
            .iter()
            .zip(&view_returns)
            .map(|(tk, r)| (tk.clone(), r[t - start]))
            .collect();
        let bl = match bt::strategy_black_litterman(&panel, &caps, t, &views, &params) {
            Ok(w) => w,
            Err(e) => {
                let msg = format!("BL on {day}: {e}; using MW weights");
                log::warn!("{msg}");
                warnings.push(msg);
                mw.clone()
            }
        };
        let mv = bt::strategy_mean_variance(&bt::history_before(&panel, t, params.lookback), params.lambda)
            .in_stage("backtest", &format!("MV on {day}"))?;
        let ew = bt::strategy_equal_weight(panel.n_assets()).in_stage("backtest", "EW")?;
        for (slot, w) in daily.iter_mut().zip([bl, mv, ew, mw]) {
            slot.weights.push(w);
        }
    }

    let source = |d: &DailyWeights| {
        let start = test.start;
        let weights = d.weights.clone();
        move |t: usize| -> blcast_core::Result<Vec<f64>> { Ok(weights[t - start].clone()) }
    };
    let rf = params.rf_daily;
    let mut rolling = Vec::new();
    let mut rebalancing = Vec::new();
    let mut tallies = Vec::new();
    for &h in &run.cfg.backtest.holding_periods {
        let reports = daily
            .iter()
            .map(|d| bt::rolling_scheme(&panel, test.clone(), &mut source(d), h, d.strategy, rf))
            .collect::<blcast_core::Result<Vec<_>>>()
            .in_stage("backtest", &format!("rolling h={h}"))?;
        let refs: Vec<&BacktestReport> = reports.iter().collect();
        tallies.push(bt::tally_extremes(&refs).in_stage("backtest", "tally")?);
        rolling.extend(reports);
        for d in &daily {
            let report = bt::rebalance_run(
                &panel,
                test.clone(),
                &mut source(d),
                Some(h),
                run.cfg.backtest.cost_rate,
                d.strategy,
                rf,
            )
            .in_stage("backtest", &format!("rebalancing every {h}"))?;
            rebalancing.push(report);
        }
    }

    let report = Report {
        conventions: Conventions::current(),
        tickers: run.tickers.clone(),
        strategies: STRATEGIES.iter().map(|s| s.to_string()).collect(),
        test_start: panel.dates[test.start],
        test_end: panel.dates[test.end - 1],
        test_days: test.len(),
        cost_rate: run.cfg.backtest.cost_rate,
        forecasts: forecasts
            .iter()
            .map(|f| ForecastSummary {
                ticker: f.ticker.clone(),
                metrics: f.metrics,
                warnings: f.warnings.clone(),
            })
            .collect(),
        rolling,
        rebalancing,
        tallies,
        warnings,
    };
    write_json(&run.layout.report(), &report, "backtest")?;

    let mut header = vec!["date".to_string()];
    header.extend(run.tickers.iter().cloned());
    for d in &daily {
        let rows = test
            .clone()
            .zip(&d.weights)
            .map(|(t, w)| std::iter::once(date(panel.dates[t])).chain(w.iter().map(|x| num(*x))));
        write_atomic(&run.layout.weights(d.strategy), &csv_bytes(&header, rows), "backtest")?;
    }

    let header = ["holding_period", "runs", "strategy", "highest", "lowest"].map(String::from);
    let rows = report.tallies.iter().flat_map(|t| {
        (0..t.strategies.len()).map(move |s| {
            [
                t.holding_period.map(|h| h.to_string()).unwrap_or_default(),
                t.runs.to_string(),
                t.strategies[s].clone(),
                t.highest[s].to_string(),
                t.lowest[s].to_string(),
            ]
        })
    });
    write_atomic(&run.layout.tally(), &csv_bytes(&header, rows), "backtest")
}

/// Every stage in order, each reading what the previous one wrote.
pub fn cmd_run_all(cfg: &RunConfig) -> CliResult<()> {
    let run = Run::new(cfg)?;
    denoise(&run)?;
    decompose(&run)?;
    align(&run)?;
    train(&run)?;
    predict(&run)?;
    backtest(&run)
}

pub fn load_report(path: &Path) -> CliResult<Report> {
    read_json(path, "backtest", "report")
}
