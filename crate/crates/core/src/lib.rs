//! Daily equity return forecasting.
//!
//! The crate covers the whole modelling pipeline:
//!
//! * [`market_data`]: OHLCV history from a chart endpoint or CSV, local cache,
//!   first-year exclusion and record coverage.
//! * [`indicators`]: the fifteen per-day features (returns, moving averages,
//!   oscillators) and their sanitization rules.
//! * [`dataset`]: ten-day windows, next-day targets, min-max scaling, date
//!   splits, class weights and a synthetic factor market.
//! * [`tensor_nn`]: a small reverse-mode autodiff engine with dense, attention,
//!   encoder and LSTM layers plus a finite-difference gradient checker.
//! * [`forecasters`]: transformer / LSTM forecasters, training with early
//!   stopping, transfer initialization, head swaps and weight files.
//! * [`gbt`]: exact-greedy gradient-boosted trees.
//! * [`evaluation`]: classification/regression metrics and the ranked
//!   long/short daily backtest.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod forecasters;
pub mod gbt;
pub mod indicators;
pub mod market_data;
pub mod tensor_nn;

pub use dataset::{MinMaxScaler, Sample, SplitSpec, NUM_FEATURES, WINDOW_LEN};
pub use error::{Error, Result};
pub use evaluation::{BacktestReport, ClassificationMetrics};
pub use forecasters::{Forecaster, ModelConfig, ModelWeights, Task};
pub use gbt::{GbtModel, GbtParams};
pub use indicators::FeatureRow;
pub use market_data::{DailyBar, DateRange, TickerSeries, Universe};
