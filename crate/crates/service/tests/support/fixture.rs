//! In-process service fixture: a synthetic market behind a controllable data
//! source and small untrained models.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::NaiveDate;
use http_body_util::BodyExt;
use i2e_core::dataset::{build_universe_samples, flatten_window, synth_market, SynthConfig};
use i2e_core::forecasters::Backbone;
use i2e_core::gbt::Objective;
use i2e_core::indicators::IndicatorConfig;
use i2e_core::market_data::{DataSource, FetchOutcome};
use i2e_core::{DailyBar, DateRange, Error, Forecaster, GbtModel, GbtParams, MinMaxScaler, ModelConfig, Result, Task, TickerSeries};
use i2e_service::{router, AppState, ModelBundle, ServiceConfig};
use tower::ServiceExt;

pub struct FixtureSource {
    pub full: BTreeMap<String, Vec<DailyBar>>,
    /// Per-symbol last visible date.
    pub visible: Mutex<BTreeMap<String, NaiveDate>>,
    pub failing: Mutex<BTreeSet<String>>,
    pub calls: AtomicUsize,
}

impl FixtureSource {
    pub fn reveal_until(&self, symbol: &str, date: NaiveDate) {
        self.visible.lock().unwrap().insert(symbol.to_string(), date);
    }

    pub fn reveal_all(&self, date: NaiveDate) {
        for s in self.full.keys() {
            self.reveal_until(s, date);
        }
    }

    pub fn set_failing(&self, symbols: &[&str]) {
        *self.failing.lock().unwrap() = symbols.iter().map(|s| s.to_string()).collect();
    }

    /// Date of the `i`-th bar (all fixture series share one calendar).
    pub fn date(&self, i: usize) -> NaiveDate {
        self.full.values().next().unwrap()[i].date
    }
}

impl DataSource for FixtureSource {
    fn fetch_history(&self, symbol: &str, range: DateRange) -> Result<FetchOutcome> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.failing.lock().unwrap().contains(symbol) {
            return Err(Error::Http { symbol: symbol.into(), message: "503 from fixture".into(), retryable: true });
        }
        let Some(bars) = self.full.get(symbol) else {
            return Err(Error::Unavailable(symbol.into()));
        };
        let until = self.visible.lock().unwrap()[symbol];
        let bars: Vec<DailyBar> = bars.iter().filter(|b| range.contains(b.date) && b.date <= until).copied().collect();
        Ok(FetchOutcome { series: TickerSeries::new(symbol, bars)?, dropped: 0 })
    }
}

pub const N_STOCKS: usize = 12;
pub const N_DAYS: usize = 420;
pub const START_VISIBLE: usize = 400;

pub fn tiny(backbone: Backbone, seed: u64) -> ModelConfig {
    ModelConfig {
        backbone,
        blocks: 1,
        head_widths: vec![8],
        task: Task::Regression,
        d_model: 8,
        heads: 2,
        ffn_hidden: 8,
        lstm_hidden: 8,
        seed,
        ..ModelConfig::default()
    }
}

pub fn bundle_for(series: &[TickerSeries], seed: u64) -> ModelBundle {
    let universe = i2e_core::Universe::from_series(series.iter().cloned());
    let samples = build_universe_samples(&universe, &IndicatorConfig::default()).unwrap();
    let scaler = MinMaxScaler::fit(&samples).unwrap();
    let scaled = scaler.transform(&samples).unwrap();
    let x: Vec<Vec<f64>> = scaled.iter().map(|s| flatten_window(&s.window).to_vec()).collect();
    let y: Vec<f64> = scaled.iter().map(|s| s.target_return).collect();
    let params = GbtParams { n_estimators: 5, max_depth: 3, objective: Objective::Squared, seed, ..GbtParams::default() };
    let gbt = GbtModel::fit(&x, &y, None, &params).unwrap();
    ModelBundle::new(
        Forecaster::build(&tiny(Backbone::Transformer, seed)).unwrap(),
        Forecaster::build(&tiny(Backbone::Lstm, seed + 1)).unwrap(),
        gbt,
        scaler,
    )
    .unwrap()
}

pub struct Fixture {
    pub state: Arc<AppState>,
    pub source: Arc<FixtureSource>,
    pub router: Router,
}

pub fn fixture(seed: u64) -> Fixture {
    let m = synth_market(&SynthConfig { n_stocks: N_STOCKS, n_days: N_DAYS, seed, ..SynthConfig::default() }).unwrap();
    let series: Vec<TickerSeries> = m.universe.iter().cloned().collect();
    let source = Arc::new(FixtureSource {
        full: series.iter().map(|s| (s.symbol().to_string(), s.bars().to_vec())).collect(),
        visible: Mutex::new(BTreeMap::new()),
        failing: Mutex::new(BTreeSet::new()),
        calls: AtomicUsize::new(0),
    });
    source.reveal_all(source.date(START_VISIBLE - 1));
    let models = bundle_for(&series, seed);
    let config = ServiceConfig {
        symbols: series.iter().map(|s| s.symbol().to_string()).collect(),
        history_start: series[0].first_date().unwrap(),
        ..ServiceConfig::default()
    };
    let today = NaiveDate::from_ymd_opt(2030, 1, 1).unwrap();
    let state = Arc::new(AppState::with_clock(config, models, source.clone(), Arc::new(move || today)));
    Fixture { router: router(state.clone()), state, source }
}

pub async fn call(router: &Router, method: Method, uri: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::empty()).unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

pub async fn json(router: &Router, method: Method, uri: &str) -> (StatusCode, serde_json::Value) {
    let (s, b) = call(router, method, uri).await;
    (s, serde_json::from_slice(&b).unwrap())
}
