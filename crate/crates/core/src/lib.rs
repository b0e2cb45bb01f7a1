//! Stock forecasting with SSA denoising, multivariate-aligned EMD and
//! temporal convolutional networks, feeding Black-Litterman portfolios
//! and a backtesting engine.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod blacklitterman;
pub mod emd;
pub mod error;
pub mod forecast;
pub mod ingest;
pub mod linalg;
pub mod maemd;
pub mod ssa;
pub mod synth;
pub mod tcn;

pub use backtest::{BacktestReport, PortfolioWeights, PricePanel, Tally};
pub use blacklitterman::{MarketInputs, PosteriorEstimate, ViewSet};
pub use emd::ImfSet;
pub use error::{Error, ErrorKind, Result, StageExt};
pub use forecast::{ForecastResult, Metrics, PipelineConfig, SsaSettings};
pub use ingest::{Channel, MarketCaps, NormalizationParams, OhlcvFrame, SplitRanges, SplitSpec};
pub use linalg::Matrix;
pub use maemd::AlignedImfGroups;
pub use tcn::{TcnConfig, TcnModel};
