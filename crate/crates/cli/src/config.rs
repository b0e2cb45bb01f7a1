//! Run configuration. A TOML file with top-level keys and one section per
//! pipeline stage; omitted sections take their defaults, but a section
//! that is present must spell out every key.

use std::path::{Path, PathBuf};

use blcast_core::backtest::{BlParams, DEFAULT_COST_RATE, DEFAULT_HOLDING_PERIODS};
use blcast_core::blacklitterman as bl;
use blcast_core::emd::DEFAULT_OMEGA;
use blcast_core::{PipelineConfig, SplitSpec, SsaSettings, TcnConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Name of the market-cap sidecar inside the data directory.
pub const MARKET_CAPS_FILE: &str = "market_caps.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsaSection {
    pub enabled: bool,
    /// Embedding window; omit to use the length-based default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    pub energy_keep: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmdSection {
    pub omega: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcnSection {
    pub kernel_size: usize,
    pub hidden_sizes: Vec<usize>,
    pub num_levels: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlSection {
    pub lambda: f64,
    pub tau: f64,
    pub rf_daily: f64,
    pub lookback_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestSection {
    pub holding_periods: Vec<usize>,
    pub cost_rate: f64,
}

impl Default for SsaSection {
    fn default() -> Self {
        let s = SsaSettings::default();
        SsaSection {
            enabled: s.enabled,
            window: s.window,
            energy_keep: s.energy_keep,
        }
    }
}

impl Default for EmdSection {
    fn default() -> Self {
        EmdSection { omega: DEFAULT_OMEGA }
    }
}

impl From<&TcnConfig> for TcnSection {
    fn from(c: &TcnConfig) -> Self {
        TcnSection {
            kernel_size: c.kernel_size,
            hidden_sizes: c.hidden_sizes.clone(),
            num_levels: c.num_levels,
            dropout: c.dropout,
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            batch_size: c.batch_size,
            window: c.window,
        }
    }
}

impl Default for TcnSection {
    fn default() -> Self {
        TcnSection::from(&TcnConfig::default())
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::default();
        SplitSection {
            train_frac: s.train_frac,
            val_frac: s.val_frac,
            test_frac: s.test_frac,
        }
    }
}

impl Default for BlSection {
    fn default() -> Self {
        BlSection {
            lambda: bl::DEFAULT_LAMBDA,
            tau: bl::DEFAULT_TAU,
            rf_daily: 0.0,
            lookback_days: bl::DEFAULT_LOOKBACK,
        }
    }
}

impl Default for BacktestSection {
    fn default() -> Self {
        BacktestSection {
            holding_periods: DEFAULT_HOLDING_PERIODS.to_vec(),
            cost_rate: DEFAULT_COST_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// Assets to process; empty means every OHLCV file in `data_dir`.
    pub tickers: Vec<String>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub ssa: SsaSection,
    pub emd: EmdSection,
    pub tcn: TcnSection,
    pub split: SplitSection,
    pub bl: BlSection,
    pub backtest: BacktestSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            tickers: Vec::new(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            workers: 1,
            ssa: SsaSection::default(),
            emd: EmdSection::default(),
            tcn: TcnSection::default(),
            split: SplitSection::default(),
            bl: BlSection::default(),
            backtest: BacktestSection::default(),
        }
    }
}

const TOP_LEVEL_KEYS: [&str; 5] = ["data_dir", "tickers", "output_dir", "seed", "workers"];

/// Required keys per section, plus optional ones.
const SECTIONS: [(&str, &[&str], &[&str]); 6] = [
    ("ssa", &["enabled", "energy_keep"], &["window"]),
    ("emd", &["omega"], &[]),
    (
        "tcn",
        &[
            "kernel_size",
            "hidden_sizes",
            "num_levels",
            "dropout",
            "learning_rate",
            "epochs",
            "batch_size",
            "window",
        ],
        &[],
    ),
    ("split", &["train_frac", "val_frac", "test_frac"], &[]),
    ("bl", &["lambda", "tau", "rf_daily", "lookback_days"], &[]),
    ("backtest", &["holding_periods", "cost_rate"], &[]),
];

fn section<T: DeserializeOwned + Serialize + Default>(table: &toml::Table, name: &str) -> CliResult<T> {
    let Some(value) = table.get(name) else {
        return Ok(T::default());
    };
    let Some(inner) = value.as_table() else {
        return Err(CliError::config(name, "expected a table"));
    };
    let (_, required, optional) = SECTIONS
        .iter()
        .find(|(s, _, _)| *s == name)
        .expect("known section");
    if let Some(key) = required.iter().find(|k| !inner.contains_key(**k)) {
        return Err(CliError::config(format!("{name}.{key}"), "missing key"));
    }
    if let Some(key) = inner
        .keys()
        .find(|k| !required.contains(&k.as_str()) && !optional.contains(&k.as_str()))
    {
        return Err(CliError::config(format!("{name}.{key}"), "unknown key"));
    }
    // Deserialize key by key over the defaults so a type error names its field.
    let defaults = toml::Value::try_from(T::default()).map_err(|e| CliError::config(name, e.to_string()))?;
    for (key, v) in inner {
        let mut one = defaults.as_table().cloned().unwrap_or_default();
        one.insert(key.clone(), v.clone());
        toml::Value::Table(one)
            .try_into::<T>()
            .map_err(|e| CliError::config(format!("{name}.{key}"), e.message().to_string()))?;
    }
    value
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(name, e.message().to_string()))
}

fn top_level<T: DeserializeOwned>(table: &toml::Table, key: &str, default: T) -> CliResult<T> {
    match table.get(key) {
        None => Ok(default),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(key, e.message().to_string())),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config("<file>", e.message().to_string()))?;
        let known = |k: &str| TOP_LEVEL_KEYS.contains(&k) || SECTIONS.iter().any(|(s, _, _)| *s == k);
        if let Some(key) = table.keys().find(|k| !known(k)) {
            return Err(CliError::config(key.clone(), "unknown key"));
        }
        let d = RunConfig::default();
        Ok(RunConfig {
            data_dir: top_level(&table, "data_dir", d.data_dir)?,
            tickers: top_level(&table, "tickers", d.tickers)?,
            output_dir: top_level(&table, "output_dir", d.output_dir)?,
            seed: top_level(&table, "seed", d.seed)?,
            workers: top_level(&table, "workers", d.workers)?,
            ssa: section(&table, "ssa")?,
            emd: section(&table, "emd")?,
            tcn: section(&table, "tcn")?,
            split: section(&table, "split")?,
            bl: section(&table, "bl")?,
            backtest: section(&table, "backtest")?,
        })
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks value ranges and that the data directory exists.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |field: &str, reason: &str| Err(CliError::config(field, reason));
        if !self.data_dir.is_dir() {
            return bad("data_dir", &format!("{} is not a directory", self.data_dir.display()));
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        if !(self.ssa.energy_keep > 0.0 && self.ssa.energy_keep <= 1.0) {
            return bad("ssa.energy_keep", "must be in (0, 1]");
        }
        if self.ssa.window.is_some_and(|w| w < 2) {
            return bad("ssa.window", "must be at least 2");
        }
        if self.emd.omega == 0 {
            return bad("emd.omega", "must be positive");
        }
        if self.tcn.epochs == 0 {
            return bad("tcn.epochs", "must be positive");
        }
        self.tcn_config()
            .validate()
            .map_err(|e| CliError::config("tcn", e.to_string()))?;
        self.split_spec()
            .validate()
            .map_err(|e| CliError::config("split", e.to_string()))?;
        if !(self.bl.lambda > 0.0 && self.bl.lambda.is_finite()) {
            return bad("bl.lambda", "must be positive");
        }
        if !(self.bl.tau > 0.0 && self.bl.tau.is_finite()) {
            return bad("bl.tau", "must be positive");
        }
        if !self.bl.rf_daily.is_finite() {
            return bad("bl.rf_daily", "must be finite");
        }
        if self.bl.lookback_days < 2 {
            return bad("bl.lookback_days", "must be at least 2");
        }
        if self.backtest.holding_periods.is_empty() {
            return bad("backtest.holding_periods", "must not be empty");
        }
        if self.backtest.holding_periods.contains(&0) {
            return bad("backtest.holding_periods", "must be positive");
        }
        if !(self.backtest.cost_rate >= 0.0 && self.backtest.cost_rate.is_finite()) {
            return bad("backtest.cost_rate", "must be non-negative");
        }
        Ok(())
    }

    pub fn tcn_config(&self) -> TcnConfig {
        let t = &self.tcn;
        TcnConfig {
            kernel_size: t.kernel_size,
            hidden_sizes: t.hidden_sizes.clone(),
            num_levels: t.num_levels,
            dropout: t.dropout,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            window: t.window,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_frac: self.split.train_frac,
            val_frac: self.split.val_frac,
            test_frac: self.split.test_frac,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            ssa: SsaSettings {
                enabled: self.ssa.enabled,
                window: self.ssa.window,
                energy_keep: self.ssa.energy_keep,
            },
            omega: self.emd.omega,
            tcn: self.tcn_config(),
            split: self.split_spec(),
            seed: self.seed,
        }
    }

    pub fn bl_params(&self) -> BlParams {
        BlParams {
            lambda: self.bl.lambda,
            tau: self.bl.tau,
            rf_daily: self.bl.rf_daily,
            lookback: self.bl.lookback_days,
        }
    }

    pub fn market_caps_path(&self) -> PathBuf {
        self.data_dir.join(MARKET_CAPS_FILE)
    }

    /// Configured tickers, or every `*.csv` in the data directory other than
    /// the market-cap sidecar, sorted.
    pub fn resolve_tickers(&self) -> CliResult<Vec<String>> {
        if !self.tickers.is_empty() {
            for t in &self.tickers {
                if !self.data_dir.join(format!("{t}.csv")).is_file() {
                    return Err(CliError::config("tickers", format!("no data file for {t}")));
                }
            }
            return Ok(self.tickers.clone());
        }
        let entries = std::fs::read_dir(&self.data_dir).map_err(|e| CliError::config("data_dir", e.to_string()))?;
        let mut found: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
            .filter(|p| p.file_name().is_some_and(|n| n != MARKET_CAPS_FILE))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(CliError::config("tickers", "no OHLCV files in data_dir"));
        }
        Ok(found)
    }
}
