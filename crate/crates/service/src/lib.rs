//! Backend of the decision-support application: refreshes market data,
//! serves next-trading-day predictions ranked by the three-model regression
//! ensemble, and exposes per-ticker bar and indicator history.
//!
//! Predictions are computed once per refresh into an immutable [`Snapshot`];
//! readers clone an `Arc` to it and a refresh swaps in a new one.

mod http;
mod models;
mod predict;
mod state;

pub use http::{router, serve, HealthResponse, RankResponse, TickerResponse, DEFAULT_K};
pub use models::{ModelBundle, GBT_FILE, LSTM_FILE, SCALER_FILE, TRANSFORMER_FILE};
pub use predict::{build_predictions, next_trading_date, ModelBreakdown, PredictionRecord, PredictionSet};
pub use state::{AppState, Clock, FailedSymbol, RefreshError, RefreshSummary, ServiceConfig, Snapshot, TickerData};
