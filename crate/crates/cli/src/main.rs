use std::path::PathBuf;
use std::process::ExitCode;

use blcast_cli::{stages, CliError, CliResult, RunConfig};
use blcast_core::synth::SynthConfig;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blcast", version, about = "Denoised decomposition forecasts feeding Black-Litterman backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-asset OHLCV dataset with market caps.
    Synth(SynthArgs),
    /// SSA-denoise every channel of every asset.
    Denoise(StageArgs),
    /// Normalize and decompose denoised channels into IMFs.
    Decompose(StageArgs),
    /// Group related-channel IMFs under the close IMFs.
    Align(StageArgs),
    /// Train one network per IMF group.
    Train(StageArgs),
    /// Forecast the test window and score it.
    Predict(StageArgs),
    /// Build BL, MV, EW and MW portfolios and evaluate them.
    Backtest(StageArgs),
    /// All stages from denoise to backtest.
    RunAll(StageArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write `<ticker>.csv` files and the market-cap sidecar into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    assets: usize,
    #[arg(long, default_value_t = 900)]
    days: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Noise level of the close in dB.
    #[arg(long, default_value_t = 10.0, conflicts_with = "clean")]
    snr_db: f64,
    /// Skip noise entirely.
    #[arg(long)]
    clean: bool,
    #[arg(long, default_value = "2020-01-02")]
    start: NaiveDate,
}

#[derive(Args)]
struct StageArgs {
    /// TOML run configuration; defaults apply without one.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// SSA embedding window.
    #[arg(long)]
    ssa_window: Option<usize>,
    /// Fraction of singular-value energy SSA keeps.
    #[arg(long)]
    ssa_energy: Option<f64>,
    /// Skip SSA denoising.
    #[arg(long)]
    no_ssa: bool,
}

impl StageArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.ssa_window {
            cfg.ssa.window = Some(w);
        }
        if let Some(e) = self.ssa_energy {
            cfg.ssa.energy_keep = e;
        }
        if self.no_ssa {
            cfg.ssa.enabled = false;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stage = |args: &StageArgs, f: fn(&RunConfig) -> CliResult<()>| f(&args.resolve()?);
    match &cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                assets: a.assets,
                days: a.days,
                start: a.start,
                snr_db: (!a.clean).then_some(a.snr_db),
                seed: a.seed,
            };
            stages::cmd_synth(&a.out, &cfg)
        }
        Command::Denoise(a) => stage(a, stages::cmd_denoise),
        Command::Decompose(a) => stage(a, stages::cmd_decompose),
        Command::Align(a) => stage(a, stages::cmd_align),
        Command::Train(a) => stage(a, stages::cmd_train),
        Command::Predict(a) => stage(a, stages::cmd_predict),
        Command::Backtest(a) => stage(a, stages::cmd_backtest),
        Command::RunAll(a) => stage(a, stages::cmd_run_all),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
