use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use i2e_core::dataset::{latest_window, Window};
use i2e_core::evaluation::daily_rank;
use i2e_core::forecasters::ensemble_predict;
use i2e_core::{FeatureRow, Result};
use serde::{Deserialize, Serialize};

use crate::models::ModelBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBreakdown {
    pub transformer: f64,
    pub lstm: f64,
    pub gbt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub symbol: String,
    /// Ensemble prediction of the next-day intraday return.
    pub predicted_return: f64,
    /// 1 = highest predicted return.
    pub rank: usize,
    pub models: ModelBreakdown,
    pub ensemble: f64,
    /// Last feature date of the input window.
    pub as_of: NaiveDate,
    pub target_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub as_of: NaiveDate,
    pub target_date: NaiveDate,
    /// Sorted by rank.
    pub records: Vec<PredictionRecord>,
}

impl PredictionSet {
    /// Top and bottom `k` by ensemble value, as chosen by the backtest ranking.
    pub fn top_bottom(&self, k: usize) -> Result<(Vec<&PredictionRecord>, Vec<&PredictionRecord>)> {
        let preds: Vec<(String, f64)> = self.records.iter().map(|r| (r.symbol.clone(), r.ensemble)).collect();
        let (longs, shorts) = daily_rank(&preds, k)?;
        let by_symbol: BTreeMap<&str, &PredictionRecord> = self.records.iter().map(|r| (r.symbol.as_str(), r)).collect();
        let pick = |v: Vec<String>| v.iter().map(|s| by_symbol[s.as_str()]).collect();
        Ok((pick(longs), pick(shorts)))
    }
}

/// First weekday after `date` that is not a listed holiday.
pub fn next_trading_date(date: NaiveDate, holidays: &[NaiveDate]) -> NaiveDate {
    let mut d = date + Days::new(1);
    while matches!(d.weekday(), Weekday::Sat | Weekday::Sun) || holidays.contains(&d) {
        d = d + Days::new(1);
    }
    d
}

/// Predicts every symbol whose latest feature row is dated at the universe's
/// latest feature date. `None` when no symbol has a full window.
pub fn build_predictions(
    features: &BTreeMap<String, &[FeatureRow]>,
    bundle: &ModelBundle,
    holidays: &[NaiveDate],
) -> Result<Option<PredictionSet>> {
    let latest: Vec<(&String, NaiveDate, Window)> = features
        .iter()
        .filter_map(|(s, rows)| latest_window(rows).map(|(d, w)| (s, d, w)))
        .collect();
    let Some(as_of) = latest.iter().map(|x| x.1).max() else {
        return Ok(None);
    };
    let current: Vec<&(&String, NaiveDate, Window)> = latest.iter().filter(|x| x.1 == as_of).collect();
    for (s, d, _) in latest.iter().filter(|x| x.1 != as_of) {
        tracing::info!(symbol = %s, last = %d, %as_of, "stale symbol left out of the ranking");
    }
    let windows: Vec<Window> = current.iter().map(|x| x.2).collect();
    let members = bundle.predict(&windows)?;
    let cols: Vec<Vec<f64>> = (0..3).map(|m| members.iter().map(|v| v[m]).collect()).collect();
    let ensemble = ensemble_predict(&cols)?;
    let target_date = next_trading_date(as_of, holidays);

    let mut records: Vec<PredictionRecord> = current
        .iter()
        .zip(members.iter().zip(&ensemble))
        .map(|((s, _, _), (m, &e))| PredictionRecord {
            symbol: (*s).clone(),
            predicted_return: e,
            rank: 0,
            models: ModelBreakdown { transformer: m[0], lstm: m[1], gbt: m[2] },
            ensemble: e,
            as_of,
            target_date,
        })
        .collect();
    records.sort_by(|a, b| b.ensemble.total_cmp(&a.ensemble).then_with(|| a.symbol.cmp(&b.symbol)));
    for (i, r) in records.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(Some(PredictionSet { as_of, target_date, records }))
}
