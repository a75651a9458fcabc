use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use chrono::{Days, NaiveDate, Utc};
use i2e_core::dataset::series_features;
use i2e_core::indicators::IndicatorConfig;
use i2e_core::market_data::DataSource;
use i2e_core::{DailyBar, DateRange, FeatureRow, Result, TickerSeries};
use serde::{Deserialize, Serialize};

use crate::models::ModelBundle;
use crate::predict::{build_predictions, PredictionSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub symbols: Vec<String>,
    /// First date requested for a symbol with no cached history.
    pub history_start: NaiveDate,
    /// Non-weekend market closures used for the next trading date.
    pub holidays: Vec<NaiveDate>,
    pub bind: String,
    pub indicators: IndicatorConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            symbols: Vec::new(),
            history_start: NaiveDate::from_ymd_opt(2010, 1, 1).unwrap(),
            holidays: Vec::new(),
            bind: "127.0.0.1:8080".into(),
            indicators: IndicatorConfig::default(),
        }
    }
}

/// Full bars and the feature rows computed from them.
#[derive(Debug, Clone, PartialEq)]
pub struct TickerData {
    pub series: TickerSeries,
    pub features: Vec<FeatureRow>,
}

impl TickerData {
    pub fn build(series: TickerSeries, cfg: &IndicatorConfig) -> Result<Self> {
        let (_, features) = series_features(&series, cfg)?;
        Ok(Self { series, features })
    }

    pub fn bars(&self) -> &[DailyBar] {
        self.series.bars()
    }
}

/// Immutable view served to readers.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub tickers: BTreeMap<String, Arc<TickerData>>,
    pub predictions: Option<Arc<PredictionSet>>,
    pub data_as_of: Option<NaiveDate>,
    /// Incremented on every swap.
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedSymbol {
    pub symbol: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshSummary {
    pub updated: usize,
    pub failed: Vec<FailedSymbol>,
    pub as_of: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefreshError {
    /// Every symbol failed to fetch; the snapshot is unchanged.
    AllFailed(Vec<FailedSymbol>),
    Internal(String),
}

pub type Clock = Arc<dyn Fn() -> NaiveDate + Send + Sync>;

pub struct AppState {
    config: ServiceConfig,
    models: Arc<ModelBundle>,
    source: Arc<dyn DataSource>,
    clock: Clock,
    snapshot: RwLock<Arc<Snapshot>>,
    refresh_lock: std::sync::Mutex<()>,
}

impl AppState {
    pub fn new(config: ServiceConfig, models: ModelBundle, source: Arc<dyn DataSource>) -> Self {
        Self::with_clock(config, models, source, Arc::new(|| Utc::now().date_naive()))
    }

    pub fn with_clock(config: ServiceConfig, models: ModelBundle, source: Arc<dyn DataSource>, clock: Clock) -> Self {
        Self {
            config,
            models: Arc::new(models),
            source,
            clock,
            snapshot: RwLock::new(Arc::new(Snapshot::default())),
            refresh_lock: std::sync::Mutex::new(()),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn models(&self) -> &ModelBundle {
        &self.models
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.snapshot.read().unwrap_or_else(|e| e.into_inner()))
    }

    /// Fetches bars newer than the cache for every configured symbol,
    /// recomputes features for symbols that changed and, if anything changed
    /// (or nothing was predicted yet), rebuilds the predictions. The new
    /// snapshot replaces the old one in a single swap. Blocking.
    pub fn refresh(&self) -> std::result::Result<RefreshSummary, RefreshError> {
        let _writer = self.refresh_lock.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.snapshot();
        let today = (self.clock)();
        let mut tickers = current.tickers.clone();
        let mut failed = Vec::new();
        let mut updated = 0;

        for symbol in &self.config.symbols {
            let cached = tickers.get(symbol);
            let start = match cached.and_then(|t| t.series.last_date()) {
                Some(last) => last + Days::new(1),
                None => self.config.history_start,
            };
            if start > today {
                continue;
            }
            let fetched = match self.source.fetch_history(symbol, DateRange::new(start, today)) {
                Ok(f) => f,
                Err(e) => {
                    tracing::warn!(%symbol, error = %e, "fetch failed");
                    failed.push(FailedSymbol { symbol: symbol.clone(), reason: e.to_string() });
                    continue;
                }
            };
            let mut series = cached.map_or_else(|| TickerSeries::empty(symbol.as_str()), |t| t.series.clone());
            if series.append_newer(fetched.series.bars()) == 0 {
                continue;
            }
            match TickerData::build(series, &self.config.indicators) {
                Ok(data) => {
                    tickers.insert(symbol.clone(), Arc::new(data));
                    updated += 1;
                }
                Err(e) => failed.push(FailedSymbol { symbol: symbol.clone(), reason: e.to_string() }),
            }
        }

        if !self.config.symbols.is_empty() && failed.len() == self.config.symbols.len() {
            return Err(RefreshError::AllFailed(failed));
        }
        let data_as_of = tickers.values().filter_map(|t| t.series.last_date()).max();
        let predictions = if updated == 0 && current.predictions.is_some() {
            current.predictions.clone()
        } else {
            let rows: BTreeMap<String, &[FeatureRow]> =
                tickers.iter().map(|(s, t)| (s.clone(), t.features.as_slice())).collect();
            build_predictions(&rows, &self.models, &self.config.holidays)
                .map_err(|e| RefreshError::Internal(e.to_string()))?
                .map(Arc::new)
        };
        let next = Arc::new(Snapshot { tickers, predictions, data_as_of, generation: current.generation + 1 });
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = next;
        tracing::info!(updated, failed = failed.len(), ?data_as_of, "refresh finished");
        Ok(RefreshSummary { updated, failed, as_of: data_as_of })
    }
}
