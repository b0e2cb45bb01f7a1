//! End-to-end acceptance checks. Runs without the libtest harness and
//! prints one PASS/FAIL line per criterion; exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use blcast_cli::{stages, RunConfig};
use blcast_core::backtest::{self as bt, PricePanel};
use blcast_core::blacklitterman::{self as bl, MarketInputs, PosteriorEstimate, ViewSet};
use blcast_core::emd::{self, count_zero_crossings, find_extrema};
use blcast_core::forecast::{self, PipelineConfig, SsaSettings};
use blcast_core::maemd::{self, interval_distribution_from_extrema, laplace_smooth};
use blcast_core::synth::{self, business_days, SynthConfig};
use blcast_core::tcn::{compute_gradients, residual_block, TcnConfig, TcnModel};
use blcast_core::{ssa, Channel, Matrix};
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn flat_panel(n_assets: usize, days: usize, seed: u64) -> PricePanel {
    let mut r = rng(seed);
    let cols: Vec<Vec<f64>> = (0..n_assets)
        .map(|_| {
            let mut p = 100.0;
            (0..days)
                .map(|_| {
                    p *= 1.0 + r.random_range(-0.02..0.02);
                    p
                })
                .collect()
        })
        .collect();
    let tickers = (0..n_assets).map(|i| format!("A{i}")).collect();
    let dates = business_days(NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(), days);
    PricePanel::new(tickers, dates, Matrix::from_columns(&cols).unwrap()).unwrap()
}

fn c1_run_counts() -> Check {
    let panel = flat_panel(4, 140, 1);
    let test = 8..140;
    let mut ew = |_t: usize| bt::strategy_equal_weight(4);
    let mut got = Vec::new();
    for h in [1, 3, 5, 10, 20] {
        let r = bt::rolling_scheme(&panel, test.clone(), &mut ew, h, "EW", 0.0).map_err(err)?;
        got.push(r.run_returns.len());
    }
    ensure(got == [132, 130, 128, 123, 113], || format!("runs {got:?}"))?;
    Ok(format!("runs {got:?} on a 132-day window"))
}

/// `A A' / n + d I`, scaled to daily-return magnitudes.
fn random_spd(r: &mut ChaCha8Rng, n: usize) -> Matrix {
    let a = Matrix::from_vec(n, n, (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let mut s = a.matmul(&a.transpose()).unwrap().scale(1.0 / n as f64);
    for i in 0..n {
        s[(i, i)] += 0.05;
    }
    s.scale(1e-4)
}

fn random_simplex(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c2_bl_fixed_points() -> Check {
    let mut r = rng(2);
    let (mut worst_a, mut worst_b, mut worst_c) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..100 {
        let n = 2 + trial % 19;
        let sigma = random_spd(&mut r, n);
        let w_mkt = random_simplex(&mut r, n);
        let tickers: Vec<String> = (0..n).map(|i| format!("A{i}")).collect();
        let inputs = MarketInputs {
            tickers: tickers.clone(),
            sigma: sigma.clone(),
            w_mkt: w_mkt.clone(),
            lambda: bl::DEFAULT_LAMBDA,
            tau: bl::DEFAULT_TAU,
            rf: 0.0,
        };
        let pi = bl::implied_returns(&inputs).map_err(err)?;

        let none = bl::posterior(&pi, &sigma, &ViewSet::empty(n), inputs.tau).map_err(err)?;
        worst_a = worst_a.max(max_diff(&none.mu, &pi));

        let viewed: Vec<(String, f64)> = (0..n)
            .filter(|_| r.random_bool(0.5))
            .map(|i| (tickers[i].clone(), pi[i]))
            .collect();
        let views = bl::build_views(&viewed, &tickers, &sigma, inputs.tau).map_err(err)?;
        let agree = bl::posterior(&pi, &sigma, &views, inputs.tau).map_err(err)?;
        worst_b = worst_b.max(max_diff(&agree.mu, &pi));

        let prior_only = PosteriorEstimate {
            mu: pi.clone(),
            sigma: sigma.clone(),
        };
        let w = bl::optimal_weights(&prior_only, inputs.lambda).map_err(err)?;
        worst_c = worst_c.max(max_diff(&w, &w_mkt));
    }
    ensure(worst_a <= 1e-10, || format!("zero views: max |mu - pi| = {worst_a:e}"))?;
    ensure(worst_b <= 1e-10, || format!("agreeing views: max |mu - pi| = {worst_b:e}"))?;
    ensure(worst_c <= 1e-8, || format!("round trip: max |w - w_mkt| = {worst_c:e}"))?;
    Ok(format!(
        "100 trials N<=20: zero views {worst_a:.1e}, Q=P*pi {worst_b:.1e}, round trip {worst_c:.1e}"
    ))
}

fn tones(n: usize, parts: &[(f64, f64, f64)], slope: f64) -> Vec<f64> {
    (0..n)
        .map(|t| {
            let t = t as f64;
            slope * t
                + parts
                    .iter()
                    .map(|(amp, period, phase)| amp * (2.0 * std::f64::consts::PI * t / period + phase).sin())
                    .sum::<f64>()
        })
        .collect()
}

fn c3_emd_completeness() -> Check {
    let mut r = rng(3);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut series = Vec::new();
    for i in 0..50 {
        let n = r.random_range(200..800);
        if i % 2 == 0 {
            series.push((0..n).map(|_| noise.sample(&mut r)).collect::<Vec<f64>>());
        } else {
            let mut p = 0.0;
            series.push((0..n).map(|_| {
                p += noise.sample(&mut r);
                p
            }).collect());
        }
    }
    for _ in 0..50 {
        let n = r.random_range(300..900);
        let parts: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (r.random_range(0.5..3.0), r.random_range(5.0..80.0), r.random_range(0.0..6.0)))
            .collect();
        let mut x = tones(n, &parts, r.random_range(-0.02..0.02));
        for v in x.iter_mut() {
            *v += 0.2 * noise.sample(&mut r);
        }
        series.push(x);
    }
    let (mut worst_err, mut total_imfs, mut worst_res) = (0.0f64, 0, 0);
    for (k, x) in series.iter().enumerate() {
        let set = emd::decompose(x, emd::DEFAULT_OMEGA).map_err(err)?;
        worst_err = worst_err.max(max_diff(&set.reconstruct(), x));
        for (i, imf) in set.imfs.iter().enumerate() {
            let e = find_extrema(imf).map_err(err)?.count() as i64;
            let z = count_zero_crossings(imf) as i64;
            ensure((e - z).abs() <= 1, || format!("series {k} imf {i}: {e} extrema vs {z} crossings"))?;
        }
        total_imfs += set.len();
        let res = find_extrema(&set.residual).map_err(err)?.count();
        worst_res = worst_res.max(res);
    }
    ensure(worst_err <= 1e-8, || format!("reconstruction error {worst_err:e}"))?;
    ensure(worst_res < emd::DEFAULT_OMEGA, || format!("residual with {worst_res} extrema"))?;
    Ok(format!(
        "100 series, {total_imfs} IMFs: reconstruction {worst_err:.1e}, max residual extrema {worst_res}"
    ))
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn c4_ssa() -> Check {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = r.random_range(50..400);
        let x: Vec<f64> = (0..n).map(|t| 100.0 + 0.05 * t as f64 + r.random_range(-3.0..3.0)).collect();
        let y = ssa::denoise(&x, ssa::default_window(n), 1.0).map_err(err)?;
        worst = worst.max(max_diff(&x, &y));
    }
    ensure(worst <= 1e-8, || format!("energy_keep=1 error {worst:e}"))?;

    let n = 500;
    let mut wins = 0;
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let period = r.random_range(20.0..60.0);
        let clean = tones(n, &[(1.0, period, r.random_range(0.0..6.0))], 0.0);
        let mut nr = rng(5000 + seed);
        let noisy = synth::add_noise(&clean, 10.0, &mut nr);
        let den = ssa::denoise(&noisy, ssa::default_window(n), ssa::DEFAULT_ENERGY_KEEP).map_err(err)?;
        if rms(&den, &clean) < rms(&noisy, &clean) {
            wins += 1;
        }
    }
    ensure(wins >= 95, || format!("denoising helped in {wins}/100 trials"))?;
    Ok(format!("identity {worst:.1e}; denoising helped in {wins}/100 trials"))
}

fn c5_kld_alignment() -> Check {
    let mut r = rng(5);
    let random_extrema = |r: &mut ChaCha8Rng| {
        let mut pos = 0;
        (0..r.random_range(3..40))
            .map(|_| {
                pos += r.random_range(1..25);
                pos
            })
            .collect::<Vec<usize>>()
    };
    let mut worst_self = 0.0f64;
    let mut min_kld = f64::INFINITY;
    for _ in 0..1000 {
        let p = interval_distribution_from_extrema(&random_extrema(&mut r)).map_err(err)?;
        let q = interval_distribution_from_extrema(&random_extrema(&mut r)).map_err(err)?;
        let mut support = p.support();
        support.extend(q.support());
        let (ps, qs) = (laplace_smooth(&p, &support).map_err(err)?, laplace_smooth(&q, &support).map_err(err)?);
        worst_self = worst_self.max(maemd::kld(&ps, &ps).map_err(err)?.abs());
        min_kld = min_kld.min(maemd::kld(&ps, &qs).map_err(err)?);
    }
    ensure(worst_self <= 1e-12, || format!("kld(p, p) = {worst_self:e}"))?;
    ensure(min_kld >= 0.0, || format!("negative kld {min_kld:e}"))?;

    let mut checked_sets = 0;
    for k in 0..5 {
        let n = 1000;
        let x = tones(
            n,
            &[(2.0, 90.0 + 10.0 * k as f64, 0.0), (1.0, 20.0 + k as f64, 0.4), (0.5, 4.5, 1.0 + 0.2 * k as f64)],
            0.001,
        );
        let set = emd::decompose(&x, emd::DEFAULT_OMEGA).map_err(err)?;
        let aligned = maemd::align(&set, &[(Channel::Open, set.clone())]).map_err(err)?;
        for (i, g) in aligned.groups.iter().enumerate() {
            let idx: Vec<usize> = g.members[0].sources.iter().map(|a| a.imf_index).collect();
            ensure(idx == vec![i], || format!("self alignment: group {i} got {idx:?}"))?;
        }
        let related = emd::decompose(&tones(n, &[(1.5, 85.0, 0.3), (0.8, 22.0, 0.1), (0.4, 5.0, 0.0)], 0.0), 20)
            .map_err(err)?;
        let base = maemd::align(&set, &[(Channel::High, related.clone())]).map_err(err)?;
        for scale in [1e-3, 0.5, 7.0, 1e4] {
            let mut scaled = related.clone();
            scaled.imfs.iter_mut().flatten().for_each(|v| *v *= scale);
            let again = maemd::align(&set, &[(Channel::High, scaled)]).map_err(err)?;
            for (a, b) in base.groups.iter().zip(&again.groups) {
                ensure(a.members[0].sources == b.members[0].sources, || format!("assignments changed at scale {scale}"))?;
            }
        }
        checked_sets += 1;
    }
    Ok(format!(
        "kld(p,p) {worst_self:.1e}, min kld over 1000 pairs {min_kld:.2e}; self alignment and scaling on {checked_sets} signals"
    ))
}

fn c6_tcn_gradients() -> Check {
    let cfg = TcnConfig {
        kernel_size: 2,
        hidden_sizes: vec![8, 8],
        num_levels: 2,
        window: 7,
        ..TcnConfig::default()
    };
    let mut r = rng(6);
    let mut model = TcnModel::new(cfg, 5).map_err(err)?;
    for p in model.params_mut() {
        *p = r.random_range(-0.5..0.5);
    }
    let window = |r: &mut ChaCha8Rng, steps: usize| {
        Matrix::from_vec(steps, 5, (0..steps * 5).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let xs: Vec<Matrix> = (0..4).map(|_| window(&mut r, 7)).collect();
    let inputs: Vec<&Matrix> = xs.iter().collect();
    let targets: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let analytic = compute_gradients(&model, &inputs, &targets).map_err(err)?.grads;
    let loss = |m: &TcnModel| compute_gradients(m, &inputs, &targets).map(|g| g.loss).map_err(err);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let picks = 120;
    for _ in 0..picks {
        let i = r.random_range(0..model.num_params());
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = loss(&model)?;
        model.params_mut()[i] = orig - h;
        let down = loss(&model)?;
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    ensure(worst <= 1e-4, || format!("relative gradient error {worst:e}"))?;

    // Block outputs at steps <= s must not see inputs after s, and the
    // network output must not see steps outside its receptive field.
    let steps = 16;
    let mut long = TcnModel::new(
        TcnConfig {
            window: steps,
            ..model.config().clone()
        },
        5,
    )
    .map_err(err)?;
    long.params_mut().copy_from_slice(model.params());
    let base = window(&mut r, steps);
    let mut input = base.clone();
    for level in 0..2 {
        let out = residual_block(&input, &long.level(level), None).map_err(err)?;
        for s in 0..steps {
            let mut bumped = input.clone();
            for t in s + 1..steps {
                for c in 0..input.cols() {
                    bumped[(t, c)] += r.random_range(-1.0..1.0);
                }
            }
            let moved = residual_block(&bumped, &long.level(level), None).map_err(err)?;
            for t in 0..=s {
                ensure(moved.row(t) == out.row(t), || format!("level {level}: step {t} saw input after {s}"))?;
            }
        }
        input = out;
    }
    let y = long.forward(&base).map_err(err)?;
    let field = long.config().receptive_field();
    for s in 0..steps - field {
        let mut bumped = base.clone();
        for c in 0..5 {
            bumped[(s, c)] += 1.0;
        }
        ensure(long.forward(&bumped).map_err(err)? == y, || format!("step {s} is outside the receptive field but moved the output"))?;
    }
    Ok(format!("{picks} parameters, worst relative error {worst:.1e}; causality exact"))
}

fn acceptance_tcn() -> TcnConfig {
    TcnConfig {
        hidden_sizes: vec![16, 16],
        epochs: 40,
        learning_rate: 1e-3,
        ..TcnConfig::default()
    }
}

struct SuiteResult {
    rmse: Vec<(f64, f64)>,
    imf1_r2: Vec<(f64, f64)>,
}

fn run_forecast_suite() -> Result<SuiteResult, String> {
    let market = synth::generate(&SynthConfig::default()).map_err(err)?;
    let with = PipelineConfig {
        tcn: acceptance_tcn(),
        seed: 1,
        ..PipelineConfig::default()
    };
    let without = PipelineConfig {
        ssa: SsaSettings {
            enabled: false,
            ..SsaSettings::default()
        },
        ..with.clone()
    };
    let mut out = SuiteResult {
        rmse: Vec::new(),
        imf1_r2: Vec::new(),
    };
    for asset in &market.assets {
        let a = forecast::predict_stock(&asset.frame, &with).map_err(err)?;
        let b = forecast::predict_stock(&asset.frame, &without).map_err(err)?;
        let r2 = |f: &forecast::ForecastResult| -> Result<f64, String> {
            let g = f.group("imf_1").ok_or("no imf_1 group")?;
            forecast::r2(&g.test_actual, &g.test_predicted).map_err(err)
        };
        out.rmse.push((a.metrics.rmse, b.metrics.rmse));
        out.imf1_r2.push((r2(&a)?, r2(&b)?));
    }
    Ok(out)
}

fn c7_direction(suite: &SuiteResult) -> Check {
    let wins = suite.rmse.iter().filter(|(a, b)| a <= b).count();
    let detail: Vec<String> = suite.rmse.iter().map(|(a, b)| format!("{a:.2}/{b:.2}")).collect();
    ensure(wins >= 6, || format!("SSA RMSE <= no-SSA RMSE on {wins}/8 assets [{}]", detail.join(" ")))?;
    Ok(format!("SSA RMSE <= no-SSA RMSE on {wins}/8 assets [{}]", detail.join(" ")))
}

fn c8_imf1(suite: &SuiteResult) -> Check {
    let wins = suite.imf1_r2.iter().filter(|(a, b)| a > b).count();
    let detail: Vec<String> = suite.imf1_r2.iter().map(|(a, b)| format!("{a:.2}/{b:.2}")).collect();
    ensure(wins >= 6, || format!("IMF_1 R2 improved on {wins}/8 assets [{}]", detail.join(" ")))?;
    Ok(format!("IMF_1 R2 with/without SSA improved on {wins}/8 assets [{}]", detail.join(" ")))
}

fn c9_accounting() -> Check {
    let days = 30;
    let mut cols = vec![vec![10.0; days], vec![20.0; days]];
    // Let prices move too, so the ledger is not trivially flat.
    let mut r = rng(9);
    for c in cols.iter_mut() {
        for t in 1..days {
            c[t] = c[t - 1] * (1.0 + r.random_range(-0.03..0.03));
        }
    }
    let dates = business_days(NaiveDate::from_ymd_opt(2022, 3, 1).unwrap(), days);
    let panel = PricePanel::new(vec!["A".into(), "B".into()], dates, Matrix::from_columns(&cols).unwrap())
        .map_err(err)?;
    let test = 1..days;
    let cost = 0.002;
    let mut flip = |t: usize| Ok(if t.is_multiple_of(2) { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
    let rep = bt::rebalance_run(&panel, test.clone(), &mut flip, Some(1), cost, "alt", 0.0).map_err(err)?;
    // Hand ledger: all wealth sits in one asset, so each flip turns over 2.
    let mut wealth = 1.0;
    for t in test.clone() {
        if t > test.start {
            wealth *= 1.0 - cost * 2.0;
        }
        let i = if t % 2 == 0 { 0 } else { 1 };
        wealth *= cols[i][t] / cols[i][t - 1];
    }
    let ledger_err = (1.0 + rep.cumulative_return - wealth).abs();
    ensure(ledger_err <= 1e-10, || format!("ledger mismatch {ledger_err:e}"))?;

    let w0 = [0.3, 0.7];
    let mut hold = |_t: usize| Ok(w0.to_vec());
    let buy_hold = bt::rebalance_run(&panel, test.clone(), &mut hold, None, 0.0, "hold", 0.0).map_err(err)?;
    let mut drifted = |t: usize| {
        let v: Vec<f64> = (0..2).map(|i| w0[i] * cols[i][t - 1] / cols[i][test.start - 1]).collect();
        let s: f64 = v.iter().sum();
        Ok(v.into_iter().map(|x| x / s).collect())
    };
    let rebalanced = bt::rebalance_run(&panel, test.clone(), &mut drifted, Some(1), 0.0, "drift", 0.0).map_err(err)?;
    let noop_err = (buy_hold.cumulative_return - rebalanced.cumulative_return).abs();
    ensure(noop_err <= 1e-12, || format!("rebalancing to held weights moved wealth by {noop_err:e}"))?;

    let h = bt::hhi(&bt::strategy_equal_weight(20).map_err(err)?);
    ensure(h == 0.05, || format!("HHI of EW N=20 is {h:?}"))?;
    Ok(format!("ledger error {ledger_err:.1e}; no-op rebalance {noop_err:.1e}; EW20 HHI == 0.05"))
}

fn c10_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = dir.path().join("data");
    let synth_cfg = SynthConfig {
        assets: 4,
        days: 320,
        seed: 10,
        ..SynthConfig::default()
    };
    stages::cmd_synth(&data, &synth_cfg).map_err(err)?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let mut cfg = RunConfig {
            data_dir: data.clone(),
            output_dir: dir.path().join(name),
            seed: 3,
            ..RunConfig::default()
        };
        cfg.tcn.hidden_sizes = vec![8, 8];
        cfg.tcn.epochs = 8;
        stages::cmd_run_all(&cfg).map_err(err)?;
        std::fs::read(dir.path().join(name).join("report.json")).map_err(err)
    };
    let (a, b) = (run("first")?, run("second")?);
    ensure(a == b, || "report.json differs between identical runs".into())?;
    Ok(format!("two run_all passes gave byte-identical report.json ({} bytes)", a.len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, budget: Duration, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(_) if took > budget => Err(format!("took {took:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} ({took:.2?})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} ({took:.2?})");
            }
        }
    };
    let secs = Duration::from_secs;
    report(1, "rolling run counts", secs(1), &mut c1_run_counts);
    report(2, "Black-Litterman fixed points", secs(5), &mut c2_bl_fixed_points);
    report(3, "EMD completeness", secs(30), &mut c3_emd_completeness);
    report(4, "SSA identity and denoising", secs(30), &mut c4_ssa);
    report(5, "KLD and alignment properties", secs(10), &mut c5_kld_alignment);
    report(6, "TCN gradients and causality", secs(60), &mut c6_tcn_gradients);

    let start = Instant::now();
    let suite = run_forecast_suite();
    let suite_time = start.elapsed();
    let budget = secs(600).saturating_sub(suite_time);
    let with_suite = |f: fn(&SuiteResult) -> Check| {
        let suite = &suite;
        move || match suite {
            Ok(s) => f(s),
            Err(e) => Err(e.clone()),
        }
    };
    println!("forecast suite: 8 assets x 2 pipelines in {suite_time:.1?}");
    report(7, "SSA improves test RMSE", budget, &mut with_suite(c7_direction));
    report(8, "SSA improves IMF_1 R2", budget, &mut with_suite(c8_imf1));
    report(9, "backtest accounting", secs(5), &mut c9_accounting);
    report(10, "run_all determinism", secs(600), &mut c10_determinism);

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
